//! Shared fixtures for the benchmarks.

use std::collections::BTreeMap;

use o2o_core::panel::{build_panel, PanelRow};
use o2o_core::simulator::{generate, simulate_uplift, SimConfig, SimData};
use o2o_core::trajectory::{daily_travel_distance, detect_visits, first_target_visits, VisitEvent, MIN_DWELL_S, VISIT_RADIUS_M};
use o2o_core::uplift::UpliftDataset;

pub const DAY_OFFSET_S: i64 = 9 * 3600;

/// A simulated world with `campaigns` campaigns of 100 users each.
pub fn world(campaigns: usize, seed: u64) -> SimData {
    generate(&SimConfig { n_campaigns: campaigns, ..SimConfig::new(seed) }).expect("simulation")
}

pub fn visits(sim: &SimData) -> Vec<VisitEvent> {
    detect_visits(&sim.records, &sim.places, VISIT_RADIUS_M, MIN_DWELL_S).expect("visits")
}

/// Seven-day panel rows around each first visit.
pub fn panel(sim: &SimData) -> Vec<PanelRow> {
    let v = visits(sim);
    let first = first_target_visits(&v, &sim.assignments, &sim.campaigns, DAY_OFFSET_S).expect("first visits");
    let days: BTreeMap<String, i64> = first.iter().map(|(u, f)| (u.clone(), f.day)).collect();
    build_panel(&daily_travel_distance(&sim.records, DAY_OFFSET_S), &days, &sim.assignments).rows
}

pub fn uplift_rows(n: usize, seed: u64) -> UpliftDataset {
    simulate_uplift(&SimConfig::new(seed), n).expect("uplift rows").0
}

use std::collections::{BTreeMap, HashMap};

use o2o_core::panel::{build_panel, fit_fixed_effects, FeConfig, PanelOptions};
use o2o_core::revisit::{build_tables, mh_pool, DEFAULT_WINDOW_DAYS};
use o2o_core::simulator::{
    generate, simulate_tables, simulate_uplift, true_bucket_tau, GroundTruth, OddsRatioSpec, SimConfig,
    SimData, TauSpec, UserTruth,
};
use o2o_core::stats::{mean, std_dev};
use o2o_core::trajectory::{
    daily_travel_distance, detect_visits, first_target_visits, home_distance, split_by_user, MIN_DWELL_S,
    VISIT_RADIUS_M,
};
use o2o_core::Error;

fn small(seed: u64) -> SimConfig {
    SimConfig { n_campaigns: 4, users_per_campaign: 60, city_places: 40, ..SimConfig::new(seed) }
}

fn visits(sim: &SimData) -> Vec<o2o_core::trajectory::VisitEvent> {
    detect_visits(&sim.records, &sim.places, VISIT_RADIUS_M, MIN_DWELL_S).unwrap()
}

#[test]
fn same_seed_writes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = generate(&small(5)).unwrap().write_dir(a.path()).unwrap();
    let fb = generate(&small(5)).unwrap().write_dir(b.path()).unwrap();
    assert_eq!(fa.len(), 6);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let other = generate(&small(6)).unwrap();
    assert_ne!(other.records, generate(&small(5)).unwrap().records);
}

#[test]
fn written_files_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let sim = generate(&small(1)).unwrap();
    sim.write_dir(dir.path()).unwrap();
    let read = |f: &str| std::fs::File::open(dir.path().join(f)).unwrap();
    let recs = o2o_core::trajectory::ingest_records(read("pings.csv")).unwrap();
    assert!(recs.rejected.is_empty());
    assert_eq!(recs.items, sim.records);
    let reg = o2o_core::trajectory::CategoryRegistry::default();
    assert_eq!(o2o_core::trajectory::read_places(read("places.csv"), &reg).unwrap().items, sim.places);
    assert_eq!(o2o_core::trajectory::read_assignments(read("assignments.csv")).unwrap().items, sim.assignments);
    assert_eq!(o2o_core::trajectory::read_campaigns(read("campaigns.csv")).unwrap().items, sim.campaigns);
    let truth: GroundTruth =
        serde_json::from_reader(read("ground_truth.json")).unwrap();
    assert_eq!(truth, sim.truth);
}

#[test]
fn detected_first_visits_and_revisits_match_truth() {
    let sim = generate(&small(2)).unwrap();
    let v = visits(&sim);
    let first = first_target_visits(&v, &sim.assignments, &sim.campaigns, 9 * 3600).unwrap();
    for (user, t) in &sim.truth.users {
        assert_eq!(first.contains_key(user), t.visitor, "{user}");
    }
    let tables = build_tables(&v, &sim.assignments, &sim.campaigns, 9 * 3600, DEFAULT_WINDOW_DAYS).unwrap();
    for (user, &r) in &tables.outcomes {
        assert_eq!(r, sim.truth.users[user].revisit, "{user}");
    }
    assert_eq!(sim.truth.clamped_days, 0);
}

#[test]
fn home_distance_is_recovered() {
    let sim = generate(&small(3)).unwrap();
    let places: HashMap<&str, _> = sim.places.iter().map(|p| (p.place_id.as_str(), p)).collect();
    let camp: HashMap<&str, _> = sim.campaigns.iter().map(|c| (c.campaign_id.as_str(), c)).collect();
    for user in split_by_user(&sim.records) {
        let t = &sim.truth.users[&user[0].user_id];
        let c = camp[t.campaign_id.as_str()];
        let est = home_distance(user, places[c.target_place_id.as_str()], c.start, 9 * 3600, 0.001).unwrap();
        // The home cell centre is at most half a diagonal (about 80 m) from the true home.
        assert!((est - t.features.last().unwrap()).abs() < 0.1, "{est} vs {:?}", t.features);
    }
}

fn panel_fit(sim: &SimData, cfg: FeConfig) -> o2o_core::panel::PanelFit {
    let v = visits(sim);
    let first = first_target_visits(&v, &sim.assignments, &sim.campaigns, 9 * 3600).unwrap();
    let days: BTreeMap<String, i64> = first.iter().map(|(u, f)| (u.clone(), f.day)).collect();
    let dist = daily_travel_distance(&sim.records, 9 * 3600);
    let panel = build_panel(&dist, &days, &sim.assignments);
    assert!(panel.rows.iter().all(|r| !r.missing));
    fit_fixed_effects(&panel.rows, cfg, &PanelOptions::default()).unwrap()
}

#[test]
fn planted_distance_effect_is_recovered() {
    let sim = generate(&small(4)).unwrap();
    let fit = panel_fit(&sim, FeConfig::MODEL_3);
    assert!(fit.ci_low <= 2.4 && 2.4 <= fit.ci_high, "{fit:?}");
}

#[test]
fn null_distance_effect_gives_equal_means() {
    let cfg = SimConfig { distance_effect_km: 0.0, ..small(7) };
    let sim = generate(&cfg).unwrap();
    let v = visits(&sim);
    let first = first_target_visits(&v, &sim.assignments, &sim.campaigns, 9 * 3600).unwrap();
    let dist = daily_travel_distance(&sim.records, 9 * 3600);
    let (mut t, mut c) = (Vec::new(), Vec::new());
    for (u, f) in &first {
        for s in 1..=3 {
            let d = dist[&(u.clone(), f.day + s)];
            if sim.truth.users[u].treated { t.push(d) } else { c.push(d) }
        }
    }
    // Per-user means, since the three post days of a user share its baseline.
    let se = (std_dev(&t).powi(2) / (t.len() / 3) as f64 + std_dev(&c).powi(2) / (c.len() / 3) as f64).sqrt();
    assert!((mean(&t) - mean(&c)).abs() < 3.0 * se, "{} vs {} (se {se})", mean(&t), mean(&c));
}

#[test]
fn unit_odds_ratio_mh_covers_one() {
    let mut covered = 0;
    for seed in 0..20 {
        let cfg = SimConfig {
            revisit_or: OddsRatioSpec::Fixed(1.0),
            tau: None,
            history_days: 1,
            ..small(100 + seed)
        };
        let sim = generate(&cfg).unwrap();
        let v = visits(&sim);
        let tables = build_tables(&v, &sim.assignments, &sim.campaigns, 9 * 3600, DEFAULT_WINDOW_DAYS).unwrap();
        let mh = mh_pool(&tables.tables).unwrap();
        covered += usize::from(mh.ci_low <= 1.0 && 1.0 <= mh.ci_high);
    }
    assert!(covered >= 18, "{covered}/20");
}

#[test]
fn assignment_is_independent_of_features() {
    for seed in 0..5 {
        let (d, _) = simulate_uplift(&SimConfig::new(seed), 4000).unwrap();
        for (name, col) in d.feature_names.iter().zip(&d.columns) {
            let (mut t, mut c) = (Vec::new(), Vec::new());
            for (x, &tr) in col.iter().zip(&d.treatment) {
                if tr { t.push(*x) } else { c.push(*x) }
            }
            let se = (std_dev(&t).powi(2) / t.len() as f64 + std_dev(&c).powi(2) / c.len() as f64).sqrt();
            assert!((mean(&t) - mean(&c)).abs() < 4.0 * se, "seed {seed} {name}");
        }
    }
}

fn two_segment_truth() -> GroundTruth {
    let cfg = SimConfig {
        revisit_or: OddsRatioSpec::Fixed(1.0),
        tau: Some(TauSpec { responder_share: 0.6, responder_tau: 0.2, other_tau: 0.0, ..TauSpec::default() }),
        ..SimConfig::new(11)
    };
    simulate_uplift(&cfg, 1000).unwrap().1
}

#[test]
fn bucket_tau_examples() {
    let truth = two_segment_truth();
    let seg = |_: &str, u: &UserTruth| Some(u.responder);
    let by_seg = true_bucket_tau(&truth, &[true, false], seg).unwrap();
    assert!((by_seg[&true] - 0.2).abs() < 1e-12);
    assert!(by_seg[&false].abs() < 1e-12);

    let all = true_bucket_tau(&truth, &[()], |_, _| Some(())).unwrap();
    assert!((all[&()] - 0.12).abs() < 1e-12, "{}", all[&()]);

    // Equal numbers from each segment.
    let ids: Vec<&String> = truth.users.iter().filter(|(_, u)| u.responder).map(|(k, _)| k).take(100).collect();
    let others: Vec<&String> = truth.users.iter().filter(|(_, u)| !u.responder).map(|(k, _)| k).take(100).collect();
    let mixed = true_bucket_tau(&truth, &["mix"], |id, _| {
        (ids.iter().any(|k| *k == id) || others.iter().any(|k| *k == id)).then_some("mix")
    })
    .unwrap();
    assert!((mixed["mix"] - 0.1).abs() < 1e-12);

    let empty = true_bucket_tau(&truth, &[1, 2], |_, _| Some(1));
    assert!(matches!(empty, Err(Error::InvalidInput(_))));
}

#[test]
fn infeasible_rates_are_errors() {
    let cfg = SimConfig {
        revisit_base_rate: 0.95,
        revisit_or: OddsRatioSpec::Fixed(2.0),
        tau: Some(TauSpec { responder_tau: 0.1, ..TauSpec::default() }),
        ..SimConfig::new(1)
    };
    assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    let bad_feature = SimConfig {
        tau: Some(TauSpec { feature: "income".into(), ..TauSpec::default() }),
        ..SimConfig::new(1)
    };
    assert!(bad_feature.validate().is_err());
}

#[test]
fn tables_follow_planted_odds_ratio() {
    let t = simulate_tables(&[1.5; 40], 2000, 0.3, 9).unwrap();
    let mh = mh_pool(&t).unwrap();
    assert!((mh.odds_ratio - 1.5).abs() < 0.1, "{mh:?}");
    assert!(t.iter().all(|x| x.a + x.b == 2000 && x.c + x.d == 2000));
}

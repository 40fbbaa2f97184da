//! Pre-experiment user features for the uplift model.

use std::collections::{BTreeMap, HashMap};

use super::UpliftDataset;
use crate::error::{Error, Result};
use crate::stats::median;
use crate::trajectory::{
    home_distance, split_by_user, Campaign, Category, CategoryRegistry, FirstVisit, LocationRecord,
    Place, VisitEvent,
};

pub const HOME_DISTANCE_FEATURE: &str = "home_distance_km";

pub struct FeatureInputs<'a> {
    /// Pings sorted by `(user_id, timestamp)`.
    pub records: &'a [LocationRecord],
    pub visits: &'a [VisitEvent],
    pub places: &'a [Place],
    pub campaigns: &'a [Campaign],
    pub first_visits: &'a BTreeMap<String, FirstVisit>,
    pub outcomes: &'a BTreeMap<String, bool>,
    pub registry: &'a CategoryRegistry,
    /// Column names and per-user values of externally supplied attributes.
    pub demographics: Option<(&'a [String], &'a HashMap<String, Vec<f64>>)>,
    pub day_offset_s: i64,
    pub home_cell_deg: f64,
}

/// One row per first-time visitor, ordered by user id.
///
/// Columns: demographics (if given), the share of pre-experiment visits in each fine shopping
/// category, and the home-to-target distance. Only data before the campaign start is used.
/// Users without night-time pings get the median home distance of the others.
pub fn build_uplift_dataset(inp: &FeatureInputs<'_>) -> Result<UpliftDataset> {
    let campaigns: HashMap<&str, &Campaign> =
        inp.campaigns.iter().map(|c| (c.campaign_id.as_str(), c)).collect();
    let places: HashMap<&str, &Place> = inp.places.iter().map(|p| (p.place_id.as_str(), p)).collect();
    let labels = inp.registry.labels(Category::Shopping);
    let label_idx: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let records: HashMap<&str, &[LocationRecord]> = split_by_user(inp.records)
        .into_iter()
        .filter_map(|r| r.first().map(|f| (f.user_id.as_str(), r)))
        .collect();

    let users: Vec<&FirstVisit> = inp.first_visits.values().collect();
    let starts: Vec<&Campaign> = users
        .iter()
        .map(|f| {
            campaigns
                .get(f.campaign_id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("unknown campaign {}", f.campaign_id)))
        })
        .collect::<Result<_>>()?;

    let mut freq = vec![vec![0.0; users.len()]; labels.len()];
    let row_of: HashMap<&str, usize> =
        users.iter().enumerate().map(|(i, f)| (f.user_id.as_str(), i)).collect();
    let mut totals = vec![0usize; users.len()];
    for v in inp.visits {
        let Some(&i) = row_of.get(v.user_id.as_str()) else { continue };
        if v.arrival >= starts[i].start || v.category != Category::Shopping {
            continue;
        }
        if let Some(&j) = label_idx.get(v.fine_category.as_str()) {
            freq[j][i] += 1.0;
            totals[i] += 1;
        }
    }
    for col in &mut freq {
        for (v, &t) in col.iter_mut().zip(&totals) {
            if t > 0 {
                *v /= t as f64;
            }
        }
    }

    let home: Vec<Option<f64>> = users
        .iter()
        .zip(&starts)
        .map(|(f, c)| -> Result<Option<f64>> {
            let target = places.get(c.target_place_id.as_str()).ok_or_else(|| {
                Error::invalid(format!("target place {} is not registered", c.target_place_id))
            })?;
            Ok(records.get(f.user_id.as_str()).and_then(|r| {
                home_distance(r, target, c.start, inp.day_offset_s, inp.home_cell_deg)
            }))
        })
        .collect::<Result<_>>()?;
    let known: Vec<f64> = home.iter().flatten().copied().collect();
    let fallback = median(&known).unwrap_or(0.0);
    let home: Vec<f64> = home.into_iter().map(|h| h.unwrap_or(fallback)).collect();

    let mut names = Vec::new();
    let mut columns = Vec::new();
    if let Some((demo_names, demo)) = inp.demographics {
        for (j, name) in demo_names.iter().enumerate() {
            names.push(name.clone());
            columns.push(
                users
                    .iter()
                    .map(|f| demo.get(&f.user_id).and_then(|v| v.get(j).copied()).unwrap_or(0.0))
                    .collect(),
            );
        }
    }
    for (l, col) in labels.iter().zip(freq) {
        names.push(format!("visit_share[{l}]"));
        columns.push(col);
    }
    names.push(HOME_DISTANCE_FEATURE.into());
    columns.push(home);

    let treatment = users.iter().map(|f| f.group.is_treated()).collect();
    let revisit = users
        .iter()
        .map(|f| inp.outcomes.get(&f.user_id).copied().unwrap_or(false))
        .collect();
    UpliftDataset::new(names, columns, treatment, revisit)?
        .with_ids(users.iter().map(|f| f.user_id.clone()).collect())
}

//! Stay-point detection against a place registry.

use std::collections::HashMap;

use rayon::prelude::*;

use super::types::{LocationRecord, Place, VisitEvent};
use crate::error::{Error, Result};
use crate::geo::haversine_m;

/// Default stay radius in metres.
pub const VISIT_RADIUS_M: f64 = 20.0;
/// Default minimum dwell in seconds.
pub const MIN_DWELL_S: i64 = 600;

const INDEX_CELL_DEG: f64 = 0.001;
const METRES_PER_DEG: f64 = 111_195.0;

/// Hash-grid index over places for fixed-radius nearest queries.
pub struct PlaceIndex<'a> {
    places: &'a [Place],
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> PlaceIndex<'a> {
    pub fn new(places: &'a [Place]) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in places.iter().enumerate() {
            buckets.entry(cell_of(p.lat, p.lon)).or_default().push(i);
        }
        PlaceIndex { places, buckets }
    }

    /// Nearest place within `radius_m` of the point; ties go to the lower registry index.
    pub fn nearest_within(&self, lat: f64, lon: f64, radius_m: f64) -> Option<(usize, f64)> {
        let (ci, cj) = cell_of(lat, lon);
        let span_lat = (radius_m / (METRES_PER_DEG * INDEX_CELL_DEG)).ceil() as i64;
        let cos = lat.to_radians().cos().max(1e-6);
        let span_lon = (radius_m / (METRES_PER_DEG * cos * INDEX_CELL_DEG)).ceil() as i64;
        let mut best: Option<(usize, f64)> = None;
        for di in -span_lat..=span_lat {
            for dj in -span_lon..=span_lon {
                let Some(ids) = self.buckets.get(&(ci + di, cj + dj)) else {
                    continue;
                };
                for &id in ids {
                    let p = &self.places[id];
                    let d = haversine_m(lat, lon, p.lat, p.lon);
                    if d > radius_m {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bid, bd)) => d < bd || (d == bd && id < bid),
                    };
                    if better {
                        best = Some((id, d));
                    }
                }
            }
        }
        best
    }

    pub fn place(&self, idx: usize) -> &Place {
        &self.places[idx]
    }
}

fn cell_of(lat: f64, lon: f64) -> (i64, i64) {
    (
        (lat / INDEX_CELL_DEG).floor() as i64,
        (lon / INDEX_CELL_DEG).floor() as i64,
    )
}

/// Detects visits: maximal runs of consecutive pings whose nearest place within `radius_m`
/// is the same, lasting at least `min_dwell_s`.
///
/// `records` may hold several users but must be sorted by `(user_id, timestamp)`.
pub fn detect_visits(
    records: &[LocationRecord],
    places: &[Place],
    radius_m: f64,
    min_dwell_s: i64,
) -> Result<Vec<VisitEvent>> {
    if places.is_empty() {
        return Err(Error::invalid("place registry is empty"));
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let index = PlaceIndex::new(places);
    let per_user: Vec<Vec<VisitEvent>> = split_by_user(records)
        .par_iter()
        .map(|user| detect_user(user, &index, radius_m, min_dwell_s))
        .collect();
    Ok(per_user.into_iter().flatten().collect())
}

/// Slices of consecutive records sharing a user id.
pub fn split_by_user(records: &[LocationRecord]) -> Vec<&[LocationRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].user_id != records[start].user_id {
            out.push(&records[start..i]);
            start = i;
        }
    }
    out
}

struct Run {
    place: usize,
    arrival: i64,
    departure: i64,
}

fn detect_user(
    records: &[LocationRecord],
    index: &PlaceIndex<'_>,
    radius_m: f64,
    min_dwell_s: i64,
) -> Vec<VisitEvent> {
    let mut out = Vec::new();
    let mut run: Option<Run> = None;
    let emit = |run: Run, out: &mut Vec<VisitEvent>| {
        if run.departure - run.arrival >= min_dwell_s {
            let p = index.place(run.place);
            out.push(VisitEvent {
                user_id: records[0].user_id.clone(),
                place_id: p.place_id.clone(),
                arrival: run.arrival,
                departure: run.departure,
                category: p.category,
                fine_category: p.fine_category.clone(),
                lat: p.lat,
                lon: p.lon,
            });
        }
    };
    for r in records {
        let hit = index.nearest_within(r.lat, r.lon, radius_m).map(|(i, _)| i);
        match (&mut run, hit) {
            (Some(cur), Some(p)) if cur.place == p => cur.departure = r.timestamp,
            (_, hit) => {
                if let Some(done) = run.take() {
                    emit(done, &mut out);
                }
                run = hit.map(|place| Run { place, arrival: r.timestamp, departure: r.timestamp });
            }
        }
    }
    if let Some(done) = run {
        emit(done, &mut out);
    }
    out
}

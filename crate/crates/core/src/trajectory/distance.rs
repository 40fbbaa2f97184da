//! Daily travel distance and home-to-shop distance.

use std::collections::{BTreeMap, HashMap};

use super::types::{LocationRecord, Place};
use super::visits::split_by_user;
use crate::geo::haversine_km;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Local day index for a UTC timestamp. `day_offset_s` is the local UTC offset.
pub fn local_day(timestamp: i64, day_offset_s: i64) -> i64 {
    (timestamp + day_offset_s).div_euclid(SECONDS_PER_DAY)
}

/// Seconds since local midnight.
pub fn local_time_of_day(timestamp: i64, day_offset_s: i64) -> i64 {
    (timestamp + day_offset_s).rem_euclid(SECONDS_PER_DAY)
}

/// Kilometres travelled per `(user, local day)`.
///
/// Sums haversine lengths of consecutive-ping segments whose endpoints fall on the same local
/// day; segments crossing midnight are dropped. A day with a single ping reports 0.
pub fn daily_travel_distance(
    records: &[LocationRecord],
    day_offset_s: i64,
) -> BTreeMap<(String, i64), f64> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
    let mut out = BTreeMap::new();
    for user in split_by_user(&sorted) {
        let mut cur_day = None;
        let mut acc = 0.0;
        let mut prev: Option<&LocationRecord> = None;
        for r in user {
            let day = local_day(r.timestamp, day_offset_s);
            if cur_day != Some(day) {
                if let Some(d) = cur_day {
                    out.insert((r.user_id.clone(), d), acc);
                }
                cur_day = Some(day);
                acc = 0.0;
            } else if let Some(p) = prev {
                acc += haversine_km(p.lat, p.lon, r.lat, r.lon);
            }
            prev = Some(r);
        }
        if let (Some(d), Some(last)) = (cur_day, user.last()) {
            out.insert((last.user_id.clone(), d), acc);
        }
    }
    out
}

/// Start of the night window in seconds after local midnight.
pub const NIGHT_END_S: i64 = 6 * 3600;

/// Distance in km from the estimated home to `target`, or `None` without night-time pings.
///
/// Only pings strictly before `experiment_start` are used. Home is the centre of the grid cell
/// (side `cell_size_deg`) holding the most pings between 00:00 and 06:00 local time; equal
/// counts go to the lexicographically smallest cell index.
pub fn home_distance(
    records: &[LocationRecord],
    target: &Place,
    experiment_start: i64,
    day_offset_s: i64,
    cell_size_deg: f64,
) -> Option<f64> {
    let mut counts: HashMap<(i64, i64), usize> = HashMap::new();
    for r in records {
        if r.timestamp >= experiment_start {
            continue;
        }
        if local_time_of_day(r.timestamp, day_offset_s) >= NIGHT_END_S {
            continue;
        }
        let cell = (
            (r.lat / cell_size_deg).floor() as i64,
            (r.lon / cell_size_deg).floor() as i64,
        );
        *counts.entry(cell).or_insert(0) += 1;
    }
    let (&(i, j), _) = counts
        .iter()
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))?;
    let lat = (i as f64 + 0.5) * cell_size_deg;
    let lon = (j as f64 + 0.5) * cell_size_deg;
    Some(haversine_km(lat, lon, target.lat, target.lon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::types::Category;

    fn rec(user: &str, ts: i64, lat: f64, lon: f64) -> LocationRecord {
        LocationRecord { user_id: user.into(), timestamp: ts, lat, lon }
    }

    #[test]
    fn same_day_segment() {
        let d = daily_travel_distance(&[rec("u", 3600, 35.0, 139.0), rec("u", 7200, 35.01, 139.0)], 0);
        let km = d[&("u".to_string(), 0)];
        let oracle = crate::geo::EARTH_RADIUS_KM * 0.01_f64.to_radians();
        assert!((km - oracle).abs() < 1e-9);
        assert!((km - 1.112).abs() / 1.112 < 1e-3);
    }

    #[test]
    fn single_ping_day_is_zero() {
        let d = daily_travel_distance(&[rec("u", 3600, 35.0, 139.0)], 0);
        assert_eq!(d[&("u".to_string(), 0)], 0.0);
    }

    #[test]
    fn midnight_segment_dropped() {
        let d = daily_travel_distance(
            &[rec("u", 86_000, 35.0, 139.0), rec("u", 87_000, 35.5, 139.0)],
            0,
        );
        assert_eq!(d[&("u".to_string(), 0)], 0.0);
        assert_eq!(d[&("u".to_string(), 1)], 0.0);
    }

    #[test]
    fn offset_shifts_day_boundary() {
        // 23:00 UTC is 08:00 the next day at UTC+9
        assert_eq!(local_day(23 * 3600, 9 * 3600), 1);
        assert_eq!(local_day(-1, 0), -1);
    }

    fn target() -> Place {
        Place {
            place_id: "t".into(),
            lat: 35.0005,
            lon: 139.0005,
            category: Category::Shopping,
            fine_category: "bakery".into(),
        }
    }

    #[test]
    fn home_in_adjacent_cell() {
        let recs: Vec<_> = (0..5).map(|d| rec("u", d * 86_400 + 3600, 35.0013, 139.0004)).collect();
        let km = home_distance(&recs, &target(), 10 * 86_400, 0, 0.001).unwrap();
        let oracle = crate::geo::EARTH_RADIUS_KM * 0.001_f64.to_radians();
        assert!((km - oracle).abs() < 1e-9);
        assert!((km - 0.111).abs() < 1e-3);
    }

    #[test]
    fn no_pre_experiment_nights() {
        let recs = vec![rec("u", 3600, 35.0, 139.0), rec("u", 12 * 3600, 35.0, 139.0)];
        assert_eq!(home_distance(&recs, &target(), 0, 0, 0.001), None);
        assert_eq!(home_distance(&recs[1..], &target(), 86_400, 0, 0.001), None);
    }

    #[test]
    fn bimodal_tie_takes_smallest_cell() {
        let recs = vec![
            rec("u", 3600, 35.0055, 139.0005),
            rec("u", 7200, 35.0005, 139.0005),
        ];
        let km = home_distance(&recs, &target(), 86_400, 0, 0.001).unwrap();
        assert!(km < 1e-9, "expected the smaller cell (the target's), got {km}");
    }
}

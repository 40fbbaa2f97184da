//! Alignment to the target shop, gridding of visits, group normalisation and dominance labels.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::types::{Category, Group, Place, VisitEvent};
use crate::error::{Error, Result};
use crate::geo::offset_distance_m;

pub const DEFAULT_CELL_SIZE_DEG: f64 = 0.001;
pub const DEFAULT_GRID_RADIUS_M: f64 = 2000.0;

/// A visit expressed as a latitude/longitude offset from the reference shop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignedPoint {
    pub user_id: String,
    /// Latitude offset in degrees.
    pub u: f64,
    /// Longitude offset in degrees.
    pub v: f64,
    pub group: Group,
    pub category: Category,
}

#[derive(Clone, Debug, Default)]
pub struct Alignment {
    pub points: Vec<AlignedPoint>,
    /// Visits dropped because their user had no assignment.
    pub skipped: usize,
}

/// Subtracts the reference coordinates from each visit location.
pub fn align_points(
    visits: &[VisitEvent],
    reference: &Place,
    assignments: &HashMap<String, Group>,
) -> Alignment {
    let mut out = Alignment::default();
    for visit in visits {
        let Some(&group) = assignments.get(&visit.user_id) else {
            out.skipped += 1;
            continue;
        };
        out.points.push(AlignedPoint {
            user_id: visit.user_id.clone(),
            u: visit.lat - reference.lat,
            v: visit.lon - reference.lon,
            group,
            category: visit.category,
        });
    }
    if out.skipped > 0 {
        log::warn!("{} visits skipped: user has no assignment", out.skipped);
    }
    out
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct GridKey {
    pub u: i64,
    pub v: i64,
    pub category: Category,
    pub group: Group,
}

/// One in-radius point retained by the grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridMember {
    pub user_id: String,
    pub u: i64,
    pub v: i64,
    pub category: Category,
    pub group: Group,
}

/// Visit counts on a regular grid of aligned offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitGrid {
    pub cell_size_deg: f64,
    pub radius_m: f64,
    /// Raw visit counts, or normalised masses once `normalized` is set.
    pub counts: BTreeMap<GridKey, f64>,
    pub members: Vec<GridMember>,
    pub normalized: bool,
}

impl VisitGrid {
    pub fn cell_center(&self, u: i64, v: i64) -> (f64, f64) {
        (
            (u as f64 + 0.5) * self.cell_size_deg,
            (v as f64 + 0.5) * self.cell_size_deg,
        )
    }

    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    /// Per-user number of in-radius points.
    pub fn user_point_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for m in &self.members {
            *out.entry(m.user_id.clone()).or_insert(0) += 1;
        }
        out
    }

    /// Per-user group as recorded on the grid members.
    pub fn member_groups(&self) -> HashMap<String, Group> {
        self.members.iter().map(|m| (m.user_id.clone(), m.group)).collect()
    }
}

/// Counts aligned points per `(cell, category, group)`.
///
/// A point is kept when the centre of its cell lies within `radius_m` of the origin, so every
/// indexed cell is inside the disc.
pub fn build_grid(points: &[AlignedPoint], cell_size_deg: f64, radius_m: f64) -> Result<VisitGrid> {
    if !(cell_size_deg > 0.0 && cell_size_deg.is_finite()) {
        return Err(Error::invalid(format!("cell size must be positive, got {cell_size_deg}")));
    }
    let mut grid = VisitGrid {
        cell_size_deg,
        radius_m,
        counts: BTreeMap::new(),
        members: Vec::new(),
        normalized: false,
    };
    for p in points {
        let u = (p.u / cell_size_deg).floor() as i64;
        let v = (p.v / cell_size_deg).floor() as i64;
        let (cu, cv) = grid.cell_center(u, v);
        if offset_distance_m(cu, cv) > radius_m {
            continue;
        }
        *grid
            .counts
            .entry(GridKey { u, v, category: p.category, group: p.group })
            .or_insert(0.0) += 1.0;
        grid.members.push(GridMember {
            user_id: p.user_id.clone(),
            u,
            v,
            category: p.category,
            group: p.group,
        });
    }
    Ok(grid)
}

/// Replaces raw counts by group-standardised masses.
///
/// Each point of user `j` in group `a` contributes `r_j = 1 / (n_j * sum_{i in a} n_i)`, where the
/// group total runs over every user of `a` listed in `user_point_counts`.
pub fn normalize_grid(
    grid: &VisitGrid,
    user_point_counts: &BTreeMap<String, usize>,
    assignments: &HashMap<String, Group>,
) -> Result<VisitGrid> {
    let mut group_totals: HashMap<Group, f64> = HashMap::new();
    for (user, &n) in user_point_counts {
        if let Some(&g) = assignments.get(user) {
            *group_totals.entry(g).or_insert(0.0) += n as f64;
        }
    }
    let mut weights: HashMap<&str, f64> = HashMap::new();
    for m in &grid.members {
        if weights.contains_key(m.user_id.as_str()) {
            continue;
        }
        let n = *user_point_counts.get(&m.user_id).ok_or_else(|| {
            Error::invalid(format!("no point count for user `{}`", m.user_id))
        })?;
        if n == 0 {
            return Err(Error::invalid(format!(
                "user `{}` has zero observed points (division by zero)",
                m.user_id
            )));
        }
        let group = *assignments.get(&m.user_id).ok_or_else(|| {
            Error::invalid(format!("user `{}` has no assignment", m.user_id))
        })?;
        let total = group_totals[&group];
        weights.insert(&m.user_id, 1.0 / (n as f64 * total));
    }

    let mut counts = BTreeMap::new();
    for m in &grid.members {
        let group = assignments[&m.user_id];
        *counts
            .entry(GridKey { u: m.u, v: m.v, category: m.category, group })
            .or_insert(0.0) += weights[m.user_id.as_str()];
    }
    Ok(VisitGrid {
        cell_size_deg: grid.cell_size_deg,
        radius_m: grid.radius_m,
        counts,
        members: grid.members.clone(),
        normalized: true,
    })
}

/// Which group dominates a grid cell, with the cell's regressors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominanceLabel {
    pub u: i64,
    pub v: i64,
    /// Cell centre offsets in degrees.
    pub center_u: f64,
    pub center_v: f64,
    pub y: u8,
    pub distance_m: f64,
    pub food_share: f64,
    pub shopping_share: f64,
    pub q_treatment: f64,
    pub q_control: f64,
}

/// One label per visited cell: `y = 1` iff the treatment mass strictly exceeds the control mass.
///
/// Category shares come from the cell's raw point counts over both groups.
pub fn dominance_labels(normalized: &VisitGrid) -> Result<Vec<DominanceLabel>> {
    if !normalized.normalized {
        return Err(Error::precondition("dominance labels need a normalised grid"));
    }
    #[derive(Default)]
    struct Acc {
        qt: f64,
        qc: f64,
        n: usize,
        food: usize,
        shopping: usize,
    }
    let mut cells: BTreeMap<(i64, i64), Acc> = BTreeMap::new();
    for (k, &q) in &normalized.counts {
        let acc = cells.entry((k.u, k.v)).or_default();
        match k.group {
            Group::Treatment => acc.qt += q,
            Group::Control => acc.qc += q,
        }
    }
    for m in &normalized.members {
        let acc = cells.entry((m.u, m.v)).or_default();
        acc.n += 1;
        match m.category {
            Category::Food => acc.food += 1,
            Category::Shopping => acc.shopping += 1,
            Category::Service => {}
        }
    }
    Ok(cells
        .into_iter()
        .filter(|(_, a)| a.n > 0)
        .map(|((u, v), a)| {
            let (cu, cv) = normalized.cell_center(u, v);
            DominanceLabel {
                u,
                v,
                center_u: cu,
                center_v: cv,
                y: u8::from(a.qt > a.qc),
                distance_m: offset_distance_m(cu, cv),
                food_share: a.food as f64 / a.n as f64,
                shopping_share: a.shopping as f64 / a.n as f64,
                q_treatment: a.qt,
                q_control: a.qc,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(user: &str, u: f64, v: f64, group: Group) -> AlignedPoint {
        AlignedPoint { user_id: user.into(), u, v, group, category: Category::Shopping }
    }

    fn place(lat: f64, lon: f64) -> Place {
        Place {
            place_id: "ref".into(),
            lat,
            lon,
            category: Category::Shopping,
            fine_category: "bakery".into(),
        }
    }

    fn visit(lat: f64, lon: f64) -> VisitEvent {
        VisitEvent {
            user_id: "u".into(),
            place_id: "p".into(),
            arrival: 0,
            departure: 600,
            category: Category::Food,
            fine_category: "cafe".into(),
            lat,
            lon,
        }
    }

    fn assigned(users: &[(&str, Group)]) -> HashMap<String, Group> {
        users.iter().map(|(u, g)| (u.to_string(), *g)).collect()
    }

    #[test]
    fn alignment_examples() {
        let a = assigned(&[("u", Group::Treatment)]);
        let p = align_points(&[visit(35.0, 139.0)], &place(35.0, 139.0), &a).points;
        assert_eq!((p[0].u, p[0].v), (0.0, 0.0));

        let p = align_points(&[visit(35.01, 139.02)], &place(35.0, 139.0), &a).points;
        assert!((p[0].u - 0.01).abs() < 1e-12 && (p[0].v - 0.02).abs() < 1e-12);

        let p = align_points(&[visit(0.0, 0.0)], &place(-10.0, -20.0), &a).points;
        assert_eq!((p[0].u, p[0].v), (10.0, 20.0));
    }

    #[test]
    fn unassigned_users_are_skipped() {
        let out = align_points(&[visit(35.0, 139.0)], &place(35.0, 139.0), &HashMap::new());
        assert!(out.points.is_empty());
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn single_point_lands_in_origin_cell() {
        let g = build_grid(&[pt("a", 0.0005, 0.0005, Group::Treatment)], 0.001, 2000.0).unwrap();
        let key = GridKey { u: 0, v: 0, category: Category::Shopping, group: Group::Treatment };
        assert_eq!(g.counts.get(&key), Some(&1.0));
        assert_eq!(g.total(), 1.0);
    }

    #[test]
    fn far_point_is_discarded() {
        let g = build_grid(&[pt("a", 0.03, 0.0, Group::Treatment)], 0.001, 2000.0).unwrap();
        assert!(g.counts.is_empty());
    }

    #[test]
    fn groups_are_counted_separately() {
        let pts = [pt("a", 0.0002, 0.0003, Group::Treatment), pt("b", 0.0004, 0.0001, Group::Control)];
        let g = build_grid(&pts, 0.001, 2000.0).unwrap();
        assert_eq!(g.counts.len(), 2);
        assert!(g.counts.values().all(|&c| c == 1.0));
    }

    #[test]
    fn negative_offsets_floor() {
        let g = build_grid(&[pt("a", -0.0001, -0.0015, Group::Control)], 0.001, 2000.0).unwrap();
        let k = g.counts.keys().next().unwrap();
        assert_eq!((k.u, k.v), (-1, -2));
    }

    #[test]
    fn bad_cell_size() {
        assert!(build_grid(&[], 0.0, 2000.0).is_err());
    }

    #[test]
    fn normalisation_hand_cases() {
        // one user, n = 1
        let g = build_grid(&[pt("a", 0.0005, 0.0005, Group::Treatment)], 0.001, 2000.0).unwrap();
        let n = g.normalize_with_own_counts();
        assert!((n.total() - 1.0).abs() < 1e-12);

        // two users with n = 1 each, same cell: 1/(1*2) + 1/(1*2)
        let pts = [pt("a", 0.0005, 0.0005, Group::Control), pt("b", 0.0005, 0.0005, Group::Control)];
        let g = build_grid(&pts, 0.001, 2000.0).unwrap();
        let n = g.normalize_with_own_counts();
        assert!((n.total() - 1.0).abs() < 1e-12);

        // n1 = n2 = 2, user a visits the cell once: 1/(2*4)
        let pts = [
            pt("a", 0.0005, 0.0005, Group::Treatment),
            pt("a", 0.0105, 0.0005, Group::Treatment),
            pt("b", 0.0055, 0.0005, Group::Treatment),
            pt("b", 0.0065, 0.0005, Group::Treatment),
        ];
        let g = build_grid(&pts, 0.001, 2000.0).unwrap();
        let n = g.normalize_with_own_counts();
        let key = GridKey { u: 0, v: 0, category: Category::Shopping, group: Group::Treatment };
        assert!((n.counts[&key] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn zero_point_user_is_an_error() {
        let g = build_grid(&[pt("a", 0.0005, 0.0005, Group::Treatment)], 0.001, 2000.0).unwrap();
        let counts = BTreeMap::from([("a".to_string(), 0usize)]);
        assert!(normalize_grid(&g, &counts, &g.member_groups()).is_err());
    }

    #[test]
    fn dominance_tie_is_zero() {
        let pts = [pt("a", 0.0005, 0.0005, Group::Treatment), pt("b", 0.0005, 0.0005, Group::Control)];
        let g = build_grid(&pts, 0.001, 2000.0).unwrap().normalize_with_own_counts();
        let labels = dominance_labels(&g).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].y, 0);
    }

    #[test]
    fn dominance_needs_normalised_grid() {
        let g = build_grid(&[pt("a", 0.0005, 0.0005, Group::Treatment)], 0.001, 2000.0).unwrap();
        assert!(dominance_labels(&g).is_err());
    }

    impl VisitGrid {
        fn normalize_with_own_counts(&self) -> VisitGrid {
            normalize_grid(self, &self.user_point_counts(), &self.member_groups()).unwrap()
        }
    }
}

//! Dominance prediction from a fitted GWR model.

use serde::Serialize;

use super::gwr::GwrFit;
use super::logistic::sigmoid;
use crate::error::{Error, Result};
use crate::geo::haversine_m;

/// A cell to score: location plus regressors in the fit's column order.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionCell {
    pub u: f64,
    pub v: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DominancePrediction {
    pub u: f64,
    pub v: f64,
    pub probability: f64,
    /// 1 iff `probability > 0.5`.
    pub label: u8,
    /// Index of the fitted location whose coefficients were used.
    pub source: usize,
    /// The cell lies outside the fitted hull expanded by one bandwidth.
    pub extrapolated: bool,
}

/// Scores each cell with the coefficient vector of its nearest fitted location.
pub fn predict_dominance(fit: &GwrFit, cells: &[PredictionCell]) -> Result<Vec<DominancePrediction>> {
    let p = fit.coefficients.ncols();
    let hull = convex_hull(&fit.locations);
    cells
        .iter()
        .map(|c| {
            if c.x.len() != p {
                return Err(Error::invalid(format!(
                    "cell has {} regressors, model has {p}",
                    c.x.len()
                )));
            }
            let (source, _) = fit
                .locations
                .iter()
                .enumerate()
                .map(|(i, &(lu, lv))| (i, haversine_m(c.u, c.v, lu, lv)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .ok_or_else(|| Error::invalid("fit has no locations"))?;
            let eta: f64 = (0..p).map(|j| fit.coefficients[(source, j)] * c.x[j]).sum();
            let probability = sigmoid(eta);
            let radius = fit.support_radius[source];
            let extrapolated = !(point_in_hull(&hull, (c.u, c.v))
                || distance_to_hull_m(&hull, (c.u, c.v)) <= radius);
            Ok(DominancePrediction {
                u: c.u,
                v: c.v,
                probability,
                label: u8::from(probability > 0.5),
                source,
                extrapolated,
            })
        })
        .collect()
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone-chain convex hull, counter-clockwise.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn point_in_hull(hull: &[(f64, f64)], p: (f64, f64)) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0.0)
}

fn distance_to_hull_m(hull: &[(f64, f64)], p: (f64, f64)) -> f64 {
    match hull.len() {
        0 => f64::INFINITY,
        1 => haversine_m(p.0, p.1, hull[0].0, hull[0].1),
        _ => (0..hull.len())
            .map(|i| {
                let a = hull[i];
                let b = hull[(i + 1) % hull.len()];
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                haversine_m(p.0, p.1, a.0 + t * dx, a.1 + t * dy)
            })
            .fold(f64::INFINITY, f64::min),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_of_square_with_interior_point() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert!(point_in_hull(&hull, (0.5, 0.5)));
        assert!(!point_in_hull(&hull, (1.5, 0.5)));
        assert!(distance_to_hull_m(&hull, (1.001, 0.5)) < 120.0);
    }
}

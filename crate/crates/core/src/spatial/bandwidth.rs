//! Bandwidth selection by golden-section search on AICc.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::gwr::{fit_gwr_logistic, Bandwidth, Bandwidths, GwrDesign, Kernel};
use crate::error::{Error, Result};

/// Whether bandwidths are neighbour counts or distances.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthKind {
    #[default]
    Adaptive,
    Fixed,
}

#[derive(Clone, Debug, Serialize)]
pub struct BandwidthSelection {
    pub shared: Bandwidth,
    pub shared_aicc: f64,
    /// Present when per-feature refinement was requested.
    pub per_feature: Option<Vec<Bandwidth>>,
    pub per_feature_aicc: Option<f64>,
    /// Every `(bandwidth value, AICc)` pair evaluated for the shared search.
    pub trace: Vec<(f64, f64)>,
}

impl BandwidthSelection {
    pub fn bandwidths(&self) -> Bandwidths {
        match &self.per_feature {
            Some(v) => Bandwidths::PerFeature(v.clone()),
            None => Bandwidths::Shared(self.shared),
        }
    }
}

/// Maximum coordinate-descent sweeps of the per-feature refinement.
pub const MAX_REFINE_SWEEPS: usize = 5;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Search interval for the given kind: `[lower, upper]` in neighbours or metres.
pub fn search_interval(design: &GwrDesign, kind: BandwidthKind) -> (f64, f64) {
    let n = design.n();
    let k_min = (5 * design.p()).max(20).min(n);
    match kind {
        BandwidthKind::Adaptive => (k_min as f64, n as f64),
        BandwidthKind::Fixed => {
            let lower = (0..n)
                .map(|i| Bandwidth::Adaptive(k_min).radius_at(design, i))
                .fold(0.0, f64::max);
            let upper = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| design.distance(i, j))
                .fold(0.0, f64::max);
            (lower, upper)
        }
    }
}

fn make(kind: BandwidthKind, v: f64) -> Bandwidth {
    match kind {
        BandwidthKind::Adaptive => Bandwidth::Adaptive(v.round() as usize),
        BandwidthKind::Fixed => Bandwidth::Fixed(v),
    }
}

/// Golden-section minimisation of `f` over `[lo, hi]`, endpoints included; returns the best
/// argument and all evaluations.
fn golden<F: FnMut(f64) -> f64>(lo: f64, hi: f64, tol: f64, integer: bool, mut f: F) -> (f64, Vec<(f64, f64)>) {
    let mut cache: BTreeMap<u64, f64> = BTreeMap::new();
    let mut eval = |x: f64, cache: &mut BTreeMap<u64, f64>| {
        let x = if integer { x.round() } else { x };
        *cache.entry(x.to_bits()).or_insert_with(|| f(x))
    };
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c, &mut cache);
    let mut fd = eval(d, &mut cache);
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c, &mut cache);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d, &mut cache);
        }
    }
    eval(lo, &mut cache);
    eval(hi, &mut cache);
    let trace: Vec<(f64, f64)> = cache.iter().map(|(k, v)| (f64::from_bits(*k), *v)).collect();
    let best = trace
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |acc, (x, v)| {
            // ties prefer the wider bandwidth
            if v < acc.1 || (v == acc.1 && x > acc.0) {
                (x, v)
            } else {
                acc
            }
        });
    (best.0, trace)
}

/// Picks a shared bandwidth minimising AICc, then optionally refines one bandwidth per feature
/// by coordinate descent holding the others fixed.
pub fn select_bandwidth(
    design: &GwrDesign,
    kernel: Kernel,
    kind: BandwidthKind,
    per_feature: bool,
) -> Result<BandwidthSelection> {
    design.check_preconditions()?;
    let (lo, hi) = search_interval(design, kind);
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("degenerate bandwidth search interval [{lo}, {hi}]")));
    }
    let integer = kind == BandwidthKind::Adaptive;
    let tol = if integer { 1.0 } else { (hi - lo) * 1e-3 };
    let score = |bws: &Bandwidths| {
        fit_gwr_logistic(design, kernel, bws).map(|f| f.aicc).unwrap_or(f64::INFINITY)
    };

    let (best, trace) = golden(lo, hi, tol, integer, |v| score(&Bandwidths::Shared(make(kind, v))));
    if !best.is_finite() {
        return Err(Error::Numerical("no bandwidth produced a finite AICc".into()));
    }
    let shared = make(kind, best);
    let shared_aicc = trace.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);

    let mut selection = BandwidthSelection {
        shared,
        shared_aicc,
        per_feature: None,
        per_feature_aicc: None,
        trace,
    };
    if !per_feature {
        return Ok(selection);
    }

    let mut current = vec![shared; design.p()];
    let mut current_aicc = score(&Bandwidths::PerFeature(current.clone()));
    for _ in 0..MAX_REFINE_SWEEPS {
        let start = current.clone();
        for j in 0..design.p() {
            let (bj, _) = golden(lo, hi, tol, integer, |v| {
                let mut trial = current.clone();
                trial[j] = make(kind, v);
                score(&Bandwidths::PerFeature(trial))
            });
            let mut trial = current.clone();
            trial[j] = make(kind, bj);
            let a = score(&Bandwidths::PerFeature(trial.clone()));
            if a < current_aicc {
                current = trial;
                current_aicc = a;
            }
        }
        if current == start {
            break;
        }
    }
    selection.per_feature = Some(current);
    selection.per_feature_aicc = Some(current_aicc);
    Ok(selection)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_interior_minimum() {
        let (x, _) = golden(0.0, 10.0, 1e-6, false, |x| (x - 3.3).powi(2));
        assert!((x - 3.3).abs() < 1e-4);
    }

    #[test]
    fn golden_returns_bound_for_monotone() {
        let (x, _) = golden(10.0, 100.0, 1.0, true, |x| -x);
        assert_eq!(x, 100.0);
    }
}

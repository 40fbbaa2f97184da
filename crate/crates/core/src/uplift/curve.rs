//! Cumulative success-rate curves and the area between model and random targeting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid points over the treated fraction `k`, endpoints included.
pub const CURVE_POINTS: usize = 101;
/// Random orderings averaged into the baseline curve.
pub const SHUFFLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftCurve {
    pub k: Vec<f64>,
    /// Success rate when the top-k fraction by score is treated.
    pub f1: Vec<f64>,
    /// Same under random ordering, averaged over seeded shuffles.
    pub f0: Vec<f64>,
    /// Trapezoidal integral of `f1 - f0` over `k`.
    pub auuc: f64,
    /// Grid indices where an arm was empty and the value was interpolated.
    pub interpolated: Vec<usize>,
}

impl UpliftCurve {
    /// Grid value of `k` with the highest `f1`; the first one on ties.
    pub fn peak_k(&self) -> f64 {
        let mut best = 0;
        for i in 1..self.f1.len() {
            if self.f1[i] > self.f1[best] {
                best = i;
            }
        }
        self.k[best]
    }
}

struct Prefix {
    tn: Vec<u32>,
    tr: Vec<u32>,
    cn: Vec<u32>,
    cr: Vec<u32>,
}

fn prefix(order: &[usize], treatment: &[bool], revisit: &[bool]) -> Prefix {
    let n = order.len();
    let mut p = Prefix {
        tn: vec![0; n + 1],
        tr: vec![0; n + 1],
        cn: vec![0; n + 1],
        cr: vec![0; n + 1],
    };
    for (m, &i) in order.iter().enumerate() {
        let (t, r) = (treatment[i], revisit[i]);
        p.tn[m + 1] = p.tn[m] + u32::from(t);
        p.tr[m + 1] = p.tr[m] + u32::from(t && r);
        p.cn[m + 1] = p.cn[m] + u32::from(!t);
        p.cr[m + 1] = p.cr[m] + u32::from(!t && r);
    }
    p
}

/// Curve values on the grid, `None` where a required arm is empty.
fn evaluate(order: &[usize], treatment: &[bool], revisit: &[bool], k: &[f64]) -> Vec<Option<f64>> {
    let n = order.len();
    let p = prefix(order, treatment, revisit);
    k.iter()
        .map(|&k| {
            let m = ((k * n as f64).round() as usize).min(n);
            let mut f = 0.0;
            if k > 0.0 {
                if p.tn[m] == 0 {
                    return None;
                }
                f += f64::from(p.tr[m]) / f64::from(p.tn[m]) * k;
            }
            if k < 1.0 {
                let (cn, cr) = (p.cn[n] - p.cn[m], p.cr[n] - p.cr[m]);
                if cn == 0 {
                    return None;
                }
                f += f64::from(cr) / f64::from(cn) * (1.0 - k);
            }
            Some(f)
        })
        .collect()
}

/// Fills gaps linearly between defined neighbours; edges copy the nearest defined value.
fn fill(values: Vec<Option<f64>>, k: &[f64], flagged: &mut Vec<usize>) -> Vec<f64> {
    let defined: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    (0..values.len())
        .map(|i| match values[i] {
            Some(v) => v,
            None => {
                flagged.push(i);
                let lo = defined.iter().rev().find(|&&j| j < i).copied();
                let hi = defined.iter().find(|&&j| j > i).copied();
                match (lo, hi) {
                    (Some(a), Some(b)) => {
                        let (va, vb) = (values[a].unwrap(), values[b].unwrap());
                        va + (vb - va) * (k[i] - k[a]) / (k[b] - k[a])
                    }
                    (Some(a), None) => values[a].unwrap(),
                    (None, Some(b)) => values[b].unwrap(),
                    (None, None) => f64::NAN,
                }
            }
        })
        .collect()
}

fn trapezoid(k: &[f64], y: &[f64]) -> f64 {
    k.windows(2).zip(y.windows(2)).map(|(k, y)| 0.5 * (k[1] - k[0]) * (y[0] + y[1])).sum()
}

/// Trapezoidal area under the model curve `f1` alone for the rows listed in `rows`.
///
/// `rows` may repeat indices (bootstrap samples). Differences of this area between two score
/// vectors equal differences of AUUC, since the random baseline does not depend on the scores.
pub(crate) fn f1_area(scores: &[f64], treatment: &[bool], revisit: &[bool], rows: &[usize]) -> f64 {
    let mut order: Vec<usize> = rows.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let k: Vec<f64> = (0..CURVE_POINTS).map(|i| i as f64 / (CURVE_POINTS - 1) as f64).collect();
    let f1 = fill(evaluate(&order, treatment, revisit, &k), &k, &mut Vec::new());
    trapezoid(&k, &f1)
}

/// Row order by descending score; ties keep row order.
pub(crate) fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Uplift curve of `scores` against observed treatment and revisit flags.
///
/// The random baseline averages [`SHUFFLES`] orderings drawn from `seed`.
pub fn uplift_curve(scores: &[f64], treatment: &[bool], revisit: &[bool], seed: u64) -> Result<UpliftCurve> {
    let n = scores.len();
    if treatment.len() != n || revisit.len() != n {
        return Err(Error::invalid("scores, treatment and revisit lengths differ"));
    }
    if !treatment.iter().any(|&t| t) || treatment.iter().all(|&t| t) {
        return Err(Error::precondition("uplift curve needs rows in both arms"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores must not be NaN"));
    }
    let k: Vec<f64> = (0..CURVE_POINTS).map(|i| i as f64 / (CURVE_POINTS - 1) as f64).collect();
    let mut flagged = Vec::new();
    let f1 = fill(evaluate(&rank_order(scores), treatment, revisit, &k), &k, &mut flagged);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f0 = vec![0.0; k.len()];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..SHUFFLES {
        order.shuffle(&mut rng);
        let v = fill(evaluate(&order, treatment, revisit, &k), &k, &mut flagged);
        f0.iter_mut().zip(v).for_each(|(a, b)| *a += b / SHUFFLES as f64);
    }
    flagged.sort_unstable();
    flagged.dedup();
    let diff: Vec<f64> = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
    Ok(UpliftCurve { auuc: trapezoid(&k, &diff), k, f1, f0, interpolated: flagged })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub auuc: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    /// One-sided: share of permuted rankings with AUUC at least as large.
    pub p_value: f64,
    pub permutations: usize,
}

/// Compares the AUUC of `scores` with the AUUC of randomly permuted scores.
pub fn auuc_permutation_test(
    scores: &[f64],
    treatment: &[bool],
    revisit: &[bool],
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest> {
    if permutations == 0 {
        return Err(Error::invalid("at least one permutation is required"));
    }
    let observed = uplift_curve(scores, treatment, revisit, seed)?.auuc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut perm = scores.to_vec();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        perm.shuffle(&mut rng);
        null.push(uplift_curve(&perm, treatment, revisit, seed)?.auuc);
    }
    let exceed = null.iter().filter(|&&a| a >= observed).count();
    Ok(PermutationTest {
        auuc: observed,
        null_mean: crate::stats::mean(&null),
        null_sd: if null.len() > 1 { crate::stats::std_dev(&null) } else { 0.0 },
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_match_and_constant_scores_give_zero() {
        let t: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let r: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        let c = uplift_curve(&vec![0.0; 200], &t, &r, 1).unwrap();
        assert!((c.f1[0] - c.f0[0]).abs() < 1e-12);
        assert!((c.f1[100] - c.f0[100]).abs() < 1e-12);
        assert_eq!(c.k.len(), 101);
        // Constant scores keep row order, which is a single fixed ordering.
        assert!(c.auuc.abs() < 0.05);
    }

    #[test]
    fn endpoint_values_are_arm_rates() {
        let t = [true, true, false, false];
        let r = [true, false, false, false];
        let c = uplift_curve(&[4.0, 3.0, 2.0, 1.0], &t, &r, 0).unwrap();
        assert_eq!(c.f1[0], 0.0);
        assert_eq!(c.f1[100], 0.5);
    }

    #[test]
    fn empty_arm_points_are_flagged() {
        // The top rows are all control, so small k has no treated rows.
        let t: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let r: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = (0..100).map(|i| -f64::from(i)).collect();
        let c = uplift_curve(&scores, &t, &r, 0).unwrap();
        assert!(c.interpolated.contains(&1));
        assert!(c.f1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_arm_is_an_error() {
        assert!(uplift_curve(&[1.0, 2.0], &[true, true], &[true, false], 0).is_err());
    }
}

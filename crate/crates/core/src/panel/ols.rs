//! Least squares with collinearity screening, optional one-way absorption and HC1 errors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Squared-norm ratio below which a column counts as linearly dependent on earlier ones.
const COLLINEAR_TOL: f64 = 1e-9;

/// Column-major regression design with named columns.
#[derive(Clone, Debug, Default)]
pub struct Design {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Design {
    pub fn push(&mut self, name: impl Into<String>, column: Vec<f64>) {
        self.names.push(name.into());
        self.columns.push(column);
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug)]
pub struct OlsResult {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// HC1 sandwich covariance of `beta`.
    pub covariance: DMatrix<f64>,
    /// Columns removed as linearly dependent on earlier columns.
    pub dropped: Vec<String>,
    pub n_obs: usize,
    /// Residual degrees of freedom, absorbed groups included.
    pub df_resid: f64,
}

impl OlsResult {
    pub fn coef(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((self.beta[i], self.covariance[(i, i)].max(0.0).sqrt()))
    }
}

/// Subtracts group means from `values`; `groups[i]` indexes the group of row `i`.
pub fn demean(values: &[f64], groups: &[usize], n_groups: usize) -> Vec<f64> {
    let mut sum = vec![0.0; n_groups];
    let mut cnt = vec![0usize; n_groups];
    for (v, &g) in values.iter().zip(groups) {
        sum[g] += v;
        cnt[g] += 1;
    }
    values
        .iter()
        .zip(groups)
        .map(|(v, &g)| v - sum[g] / cnt[g] as f64)
        .collect()
}

/// OLS of `y` on `design`.
///
/// With `absorb = Some((groups, n_groups))` every variable is demeaned within group first
/// (one-way fixed effects). Columns that are numerically dependent on earlier columns are
/// dropped in order and reported.
pub fn ols_hc1(y: &[f64], design: &Design, absorb: Option<(&[usize], usize)>) -> Result<OlsResult> {
    let n = y.len();
    let (y, columns): (Vec<f64>, Vec<Vec<f64>>) = match absorb {
        Some((groups, g)) => (
            demean(y, groups, g),
            design.columns.par_iter().map(|c| demean(c, groups, g)).collect(),
        ),
        None => (y.to_vec(), design.columns.clone()),
    };

    // Modified Gram-Schmidt pass to find dependent columns.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let norm0: f64 = col.iter().map(|v| v * v).sum();
        let mut r = col.clone();
        for q in &basis {
            let proj: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
        }
        let norm: f64 = r.iter().map(|v| v * v).sum();
        if norm0 == 0.0 || norm <= COLLINEAR_TOL * norm0 {
            dropped.push(design.names[j].clone());
            continue;
        }
        let s = norm.sqrt();
        r.iter_mut().for_each(|v| *v /= s);
        basis.push(r);
        kept.push(j);
    }
    let k = kept.len();
    if k == 0 {
        return Err(Error::RankDeficient("no estimable columns".into()));
    }
    let absorbed = absorb.map_or(0, |(_, g)| g);
    let df_resid = n as f64 - k as f64 - absorbed as f64;
    if df_resid <= 0.0 {
        return Err(Error::RankDeficient(format!(
            "{n} observations for {} parameters",
            k + absorbed
        )));
    }

    let x = DMatrix::from_fn(n, k, |i, j| columns[kept[j]][i]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * DVector::from_column_slice(&y);
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("X'X is not positive definite after screening".into()))?;
    let beta = chol.solve(&xty);
    let bread = chol.inverse();
    let resid = DVector::from_column_slice(&y) - &x * &beta;

    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let e2 = resid[i] * resid[i];
        if e2 == 0.0 {
            continue;
        }
        for a in 0..k {
            let xa = x[(i, a)] * e2;
            if xa == 0.0 {
                continue;
            }
            for b in 0..=a {
                meat[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            meat[(b, a)] = meat[(a, b)];
        }
    }
    let covariance = &bread * meat * &bread * (n as f64 / df_resid);

    Ok(OlsResult {
        names: kept.iter().map(|&j| design.names[j].clone()).collect(),
        beta: beta.iter().copied().collect(),
        covariance,
        dropped,
        n_obs: n,
        df_resid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.5 + 2.0 * v).collect();
        let mut d = Design::default();
        d.push("const", vec![1.0; 10]);
        d.push("x", x);
        let r = ols_hc1(&y, &d, None).unwrap();
        assert!((r.beta[0] - 1.5).abs() < 1e-10);
        assert!((r.beta[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn duplicate_column_is_dropped() {
        let x: Vec<f64> = (0..10).map(|v| f64::from(v).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 0.1).collect();
        let mut d = Design::default();
        d.push("const", vec![1.0; 10]);
        d.push("x", x.clone());
        d.push("x_again", x.iter().map(|v| 2.0 * v).collect());
        let r = ols_hc1(&y, &d, None).unwrap();
        assert_eq!(r.dropped, vec!["x_again".to_string()]);
        assert_eq!(r.names, vec!["const".to_string(), "x".to_string()]);
    }

    #[test]
    fn hc1_matches_hand_computation() {
        // y on a constant only: HC1 variance = sum(e^2) / n^2 * n / (n - 1)
        let y = [1.0, 2.0, 4.0, 7.0];
        let mut d = Design::default();
        d.push("const", vec![1.0; 4]);
        let r = ols_hc1(&y, &d, None).unwrap();
        let m = 3.5;
        let ss: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
        let expected = ss / 16.0 * 4.0 / 3.0;
        assert!((r.covariance[(0, 0)] - expected).abs() < 1e-12);
    }
}

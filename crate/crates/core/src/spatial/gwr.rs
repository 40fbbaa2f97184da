//! Geographically weighted logistic regression.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logistic::{self, fit_rows, sigmoid, COEF_CLIP, RIDGE};
use crate::error::{Error, Result};
use crate::geo::haversine_m;
use crate::stats::{mean, normal_two_sided_p, std_dev};
use crate::trajectory::DominanceLabel;

/// Minimum number of locations for a GWR fit.
pub const MIN_LOCATIONS: usize = 30;
/// Share of locations allowed to end without IRLS convergence.
pub const MAX_NONCONVERGED_SHARE: f64 = 0.05;

/// Regression design over spatial locations.
#[derive(Clone, Debug)]
pub struct GwrDesign {
    /// Location coordinates in degrees (aligned offsets or lat/lon).
    pub locations: Vec<(f64, f64)>,
    pub y: Vec<f64>,
    /// `n x p` regressors, intercept included as a column of ones when wanted.
    pub x: DMatrix<f64>,
    pub feature_names: Vec<String>,
    distances: Vec<f64>,
}

impl GwrDesign {
    pub fn new(
        locations: Vec<(f64, f64)>,
        y: Vec<f64>,
        x: DMatrix<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = locations.len();
        if y.len() != n || x.nrows() != n {
            return Err(Error::invalid(format!(
                "design rows disagree: {n} locations, {} responses, {} regressor rows",
                y.len(),
                x.nrows()
            )));
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::invalid("one feature name per regressor column is required"));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("response must be binary 0/1"));
        }
        if x.iter().any(|v| !v.is_finite())
            || locations.iter().any(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(Error::invalid("design contains missing or non-finite values"));
        }
        let mut distances = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = haversine_m(locations[i].0, locations[i].1, locations[j].0, locations[j].1);
                distances[i * n + j] = d;
                distances[j * n + i] = d;
            }
        }
        Ok(GwrDesign { locations, y, x, feature_names, distances })
    }

    /// Dominance design: intercept, distance from the shop in km, and optionally the food and
    /// shopping shares of the cell.
    pub fn from_labels(labels: &[DominanceLabel], with_shares: bool) -> Result<Self> {
        let p = if with_shares { 4 } else { 2 };
        let mut data = Vec::with_capacity(labels.len() * p);
        for l in labels {
            data.push(1.0);
            data.push(l.distance_m / 1000.0);
            if with_shares {
                data.push(l.food_share);
                data.push(l.shopping_share);
            }
        }
        let mut names = vec!["intercept".to_string(), "distance_km".to_string()];
        if with_shares {
            names.push("food_share".into());
            names.push("shopping_share".into());
        }
        GwrDesign::new(
            labels.iter().map(|l| (l.center_u, l.center_v)).collect(),
            labels.iter().map(|l| f64::from(l.y)).collect(),
            DMatrix::from_row_slice(labels.len(), p, &data),
            names,
        )
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Distance in metres between locations `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.n() + j]
    }

    pub(crate) fn row_distances(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.distances[i * n..(i + 1) * n]
    }

    pub(crate) fn check_preconditions(&self) -> Result<()> {
        if self.n() < MIN_LOCATIONS {
            return Err(Error::precondition(format!(
                "GWR needs at least {MIN_LOCATIONS} locations, got {}",
                self.n()
            )));
        }
        let ones = self.y.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == self.n() {
            return Err(Error::precondition("response has a single class"));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Bisquare,
    Gaussian,
}

impl Kernel {
    /// Weight at distance `d` for bandwidth `b`; 1 at `d = 0`.
    pub fn weight(self, d: f64, b: f64) -> f64 {
        if b.is_infinite() {
            return 1.0;
        }
        match self {
            Kernel::Bisquare => {
                if d < b {
                    let r = d / b;
                    (1.0 - r * r).powi(2)
                } else {
                    0.0
                }
            }
            Kernel::Gaussian => (-0.5 * (d / b).powi(2)).exp(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Bisquare => "bisquare",
            Kernel::Gaussian => "gaussian",
        }
    }
}

/// Spatial bandwidth: a fixed distance in metres or an adaptive nearest-neighbour count.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type", content = "value")]
pub enum Bandwidth {
    Fixed(f64),
    Adaptive(usize),
}

impl Bandwidth {
    /// Kernel radius at location `i`.
    ///
    /// For `Adaptive(k)` it is the distance to the `k`-th nearest other location, so `k`
    /// locations including `i` itself get positive bisquare weight; `k >= n` covers everyone.
    pub fn radius_at(self, design: &GwrDesign, i: usize) -> f64 {
        match self {
            Bandwidth::Fixed(b) => b,
            Bandwidth::Adaptive(k) => {
                let mut d: Vec<f64> = design
                    .row_distances(i)
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &d)| d)
                    .collect();
                if d.is_empty() {
                    return f64::INFINITY;
                }
                d.sort_by(f64::total_cmp);
                if k >= design.n() {
                    d[d.len() - 1] * (1.0 + 1e-6) + 1e-9
                } else {
                    d[k.max(1) - 1]
                }
            }
        }
    }

    pub fn is_positive(self) -> bool {
        match self {
            Bandwidth::Fixed(b) => b > 0.0,
            Bandwidth::Adaptive(k) => k > 0,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Bandwidth::Fixed(b) => b,
            Bandwidth::Adaptive(k) => k as f64,
        }
    }
}

/// One bandwidth for all coefficients, or one per coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidths {
    Shared(Bandwidth),
    PerFeature(Vec<Bandwidth>),
}

impl Bandwidths {
    pub fn for_feature(&self, j: usize) -> Bandwidth {
        match self {
            Bandwidths::Shared(b) => *b,
            Bandwidths::PerFeature(v) => v[j],
        }
    }
}

/// Aggregate of local coefficients for one regressor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientSummary {
    pub feature: String,
    pub mean: f64,
    /// Mean of the local standard errors; an upper bound on the standard error of the mean.
    pub std_err: f64,
    pub p_value: f64,
    /// Spread of the local coefficients.
    pub dispersion: f64,
}

#[derive(Clone, Debug)]
pub struct GwrFit {
    pub kernel: Kernel,
    pub bandwidths: Bandwidths,
    pub feature_names: Vec<String>,
    pub locations: Vec<(f64, f64)>,
    /// `n x p` local coefficients, row `i` for location `i`.
    pub coefficients: DMatrix<f64>,
    pub std_errors: DMatrix<f64>,
    pub p_values: DMatrix<f64>,
    /// In-sample fitted probability at each location from its own coefficients.
    pub fitted: Vec<f64>,
    /// Kernel radius per location (largest over features), in metres.
    pub support_radius: Vec<f64>,
    pub summary: Vec<CoefficientSummary>,
    pub deviance: f64,
    pub effective_params: f64,
    pub aicc: f64,
    /// Locations whose coefficients hit the clip bound.
    pub separated: Vec<usize>,
}

impl GwrFit {
    pub fn n(&self) -> usize {
        self.locations.len()
    }
}

/// Corrected AIC for a model with deviance `dev`, `k` effective parameters and `n` observations.
pub fn aicc(dev: f64, k: f64, n: usize) -> f64 {
    let n = n as f64;
    if n - k - 1.0 <= 0.0 {
        return f64::INFINITY;
    }
    dev + 2.0 * k + 2.0 * k * (k + 1.0) / (n - k - 1.0)
}

/// Fits the local logistic model at every location.
pub fn fit_gwr_logistic(design: &GwrDesign, kernel: Kernel, bandwidths: &Bandwidths) -> Result<GwrFit> {
    design.check_preconditions()?;
    match bandwidths {
        Bandwidths::Shared(b) => {
            if !b.is_positive() {
                return Err(Error::invalid("bandwidth must be positive"));
            }
            fit_shared(design, kernel, *b)
        }
        Bandwidths::PerFeature(bws) => {
            if bws.len() != design.p() {
                return Err(Error::invalid(format!(
                    "{} bandwidths given for {} features",
                    bws.len(),
                    design.p()
                )));
            }
            if bws.iter().any(|b| !b.is_positive()) {
                return Err(Error::invalid("bandwidths must be positive"));
            }
            fit_backfitting(design, kernel, bws)
        }
    }
}

fn kernel_weights(design: &GwrDesign, kernel: Kernel, radius: f64, i: usize) -> Vec<f64> {
    design
        .row_distances(i)
        .iter()
        .map(|&d| kernel.weight(d, radius))
        .collect()
}

struct LocalResult {
    beta: DVector<f64>,
    se: DVector<f64>,
    mu_self: f64,
    hat_diag: f64,
    radius: f64,
    converged: bool,
    separated: bool,
}

fn fit_shared(design: &GwrDesign, kernel: Kernel, bw: Bandwidth) -> Result<GwrFit> {
    let n = design.n();
    let p = design.p();
    let locals: Vec<Option<LocalResult>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let radius = bw.radius_at(design, i);
            let w = kernel_weights(design, kernel, radius, i);
            let rows: Vec<usize> = (0..n).filter(|&j| w[j] > 0.0).collect();
            let fit = fit_rows(&design.x, &design.y, &w, &rows)?;
            let xi = design.x.row(i).transpose();
            let mu_self = sigmoid(xi.dot(&fit.beta));
            let a_self = (mu_self * (1.0 - mu_self)).max(1e-10);
            let hat_diag = a_self * (xi.transpose() * &fit.covariance * &xi)[(0, 0)];
            let se = DVector::from_iterator(p, (0..p).map(|j| fit.covariance[(j, j)].max(0.0).sqrt()));
            Some(LocalResult {
                beta: fit.beta,
                se,
                mu_self,
                hat_diag,
                radius,
                converged: fit.converged,
                separated: fit.separated,
            })
        })
        .collect();
    let mut results = Vec::with_capacity(n);
    for (i, r) in locals.into_iter().enumerate() {
        results.push(r.ok_or_else(|| {
            Error::Numerical(format!("singular local system at location {i}"))
        })?);
    }
    assemble(design, kernel, Bandwidths::Shared(bw), results)
}

fn assemble(
    design: &GwrDesign,
    kernel: Kernel,
    bandwidths: Bandwidths,
    results: Vec<LocalResult>,
) -> Result<GwrFit> {
    let n = design.n();
    let p = design.p();
    let nonconverged: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.converged && !r.separated)
        .map(|(i, _)| i)
        .collect();
    if nonconverged.len() as f64 > MAX_NONCONVERGED_SHARE * n as f64 {
        return Err(Error::NonConvergence { locations: nonconverged, total: n });
    }
    let separated: Vec<usize> =
        results.iter().enumerate().filter(|(_, r)| r.separated).map(|(i, _)| i).collect();
    if !separated.is_empty() {
        log::debug!(
            "perfect separation at {} of {n} locations; coefficients clipped at |b| <= {COEF_CLIP}",
            separated.len()
        );
    }

    let mut coefficients = DMatrix::zeros(n, p);
    let mut std_errors = DMatrix::zeros(n, p);
    let mut p_values = DMatrix::zeros(n, p);
    for (i, r) in results.iter().enumerate() {
        for j in 0..p {
            coefficients[(i, j)] = r.beta[j];
            // the ridge bounds the variance; keep the error strictly positive
            let se = r.se[j].max(f64::MIN_POSITIVE);
            std_errors[(i, j)] = se;
            p_values[(i, j)] = normal_two_sided_p(r.beta[j] / se);
        }
    }
    let fitted: Vec<f64> = results.iter().map(|r| r.mu_self).collect();
    let deviance: f64 = -2.0
        * design
            .y
            .iter()
            .zip(&fitted)
            .map(|(&y, &mu)| logistic::log_lik(y, mu))
            .sum::<f64>();
    let effective_params: f64 = results.iter().map(|r| r.hat_diag).sum();
    let summary = summarize(&design.feature_names, &coefficients, &std_errors);
    Ok(GwrFit {
        kernel,
        bandwidths,
        feature_names: design.feature_names.clone(),
        locations: design.locations.clone(),
        support_radius: results.iter().map(|r| r.radius).collect(),
        coefficients,
        std_errors,
        p_values,
        fitted,
        summary,
        deviance,
        aicc: aicc(deviance, effective_params, n),
        effective_params,
        separated,
    })
}

fn summarize(names: &[String], coef: &DMatrix<f64>, se: &DMatrix<f64>) -> Vec<CoefficientSummary> {
    (0..coef.ncols())
        .map(|j| {
            let locals: Vec<f64> = coef.column(j).iter().copied().collect();
            let ses: Vec<f64> = se.column(j).iter().copied().collect();
            let m = mean(&locals);
            let s = mean(&ses);
            CoefficientSummary {
                feature: names[j].clone(),
                mean: m,
                std_err: s,
                p_value: normal_two_sided_p(m / s),
                dispersion: std_dev(&locals),
            }
        })
        .collect()
}

const BACKFIT_OUTER: usize = 50;
const BACKFIT_INNER: usize = 25;
const BACKFIT_TOL: f64 = 1e-7;

/// Per-feature bandwidths by backfitting inside a local-scoring loop.
///
/// Each sweep refits one coefficient surface at a time on the partial working residual with
/// that feature's kernel. Standard errors and effective parameters use each feature's
/// univariate local smoother, ignoring cross-feature terms.
fn fit_backfitting(design: &GwrDesign, kernel: Kernel, bws: &[Bandwidth]) -> Result<GwrFit> {
    let n = design.n();
    let p = design.p();
    let x = &design.x;
    let y = &design.y;

    let radii: Vec<Vec<f64>> =
        bws.iter().map(|b| (0..n).map(|i| b.radius_at(design, i)).collect()).collect();
    let weights: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut w = vec![0.0; n * n];
            for l in 0..n {
                for i in 0..n {
                    w[l * n + i] = kernel.weight(design.distance(l, i), radii[j][l]);
                }
            }
            w
        })
        .collect();

    let global = logistic::fit_weighted_logistic(x, y, &vec![1.0; n])
        .ok_or_else(|| Error::Numerical("global logistic fit failed".into()))?;
    let mut beta = DMatrix::from_fn(n, p, |_, j| global.beta[j]);
    let eta_of = |beta: &DMatrix<f64>, i: usize| (0..p).map(|j| x[(i, j)] * beta[(i, j)]).sum::<f64>();

    let mut converged = false;
    let mut a = vec![0.0; n];
    for _ in 0..BACKFIT_OUTER {
        let mut z = vec![0.0; n];
        for i in 0..n {
            let eta = eta_of(&beta, i);
            let mu = sigmoid(eta);
            a[i] = (mu * (1.0 - mu)).max(1e-10);
            z[i] = eta + (y[i] - mu) / a[i];
        }
        let before = beta.clone();
        for _ in 0..BACKFIT_INNER {
            let sweep_start = beta.clone();
            for j in 0..p {
                let partial: Vec<f64> = (0..n)
                    .map(|i| z[i] - (0..p).filter(|&k| k != j).map(|k| x[(i, k)] * beta[(i, k)]).sum::<f64>())
                    .collect();
                let wj = &weights[j];
                let col: Vec<f64> = (0..n)
                    .into_par_iter()
                    .map(|l| {
                        let row = &wj[l * n..(l + 1) * n];
                        let (mut num, mut den) = (0.0, RIDGE);
                        for i in 0..n {
                            if row[i] > 0.0 {
                                let t = row[i] * a[i] * x[(i, j)];
                                num += t * partial[i];
                                den += t * x[(i, j)];
                            }
                        }
                        (num / den).clamp(-COEF_CLIP, COEF_CLIP)
                    })
                    .collect();
                for (l, b) in col.into_iter().enumerate() {
                    beta[(l, j)] = b;
                }
            }
            if (&beta - &sweep_start).amax() < BACKFIT_TOL {
                break;
            }
        }
        if (&beta - &before).amax() < BACKFIT_TOL * 10.0 {
            converged = true;
            break;
        }
    }

    let results: Vec<LocalResult> = (0..n)
        .map(|l| {
            let mut se = DVector::zeros(p);
            let mut hat = 0.0;
            for j in 0..p {
                let row = &weights[j][l * n..(l + 1) * n];
                let den: f64 = RIDGE + (0..n).map(|i| row[i] * a[i] * x[(i, j)].powi(2)).sum::<f64>();
                se[j] = (1.0 / den).sqrt();
                hat += row[l] * a[l] * x[(l, j)].powi(2) / den;
            }
            let b = beta.row(l).transpose();
            LocalResult {
                mu_self: sigmoid(eta_of(&beta, l)),
                separated: b.iter().any(|v| v.abs() >= COEF_CLIP),
                beta: b,
                se,
                hat_diag: hat,
                radius: (0..p).map(|j| radii[j][l]).fold(0.0, f64::max),
                converged,
            }
        })
        .collect();
    assemble(design, kernel, Bandwidths::PerFeature(bws.to_vec()), results)
}

//! Weighted logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};

/// Ridge added to the diagonal of the weighted normal equations.
pub const RIDGE: f64 = 1e-8;
/// Coefficients are clipped to `[-COEF_CLIP, COEF_CLIP]`.
pub const COEF_CLIP: f64 = 25.0;
pub const MAX_IRLS_ITER: usize = 50;
const TOL: f64 = 1e-10;
const MIN_VARIANCE: f64 = 1e-10;

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood contribution with probabilities kept away from 0 and 1.
pub fn log_lik(y: f64, mu: f64) -> f64 {
    let mu = mu.clamp(1e-15, 1.0 - 1e-15);
    y * mu.ln() + (1.0 - y) * (1.0 - mu).ln()
}

#[derive(Clone, Debug)]
pub struct LogisticFit {
    pub beta: DVector<f64>,
    /// Inverse of the weighted Fisher information.
    pub covariance: DMatrix<f64>,
    pub converged: bool,
    /// Some coefficient reached the clip bound or the fit is perfect (separation).
    pub separated: bool,
    pub iterations: usize,
}

/// Fits `P(y=1|x) = sigmoid(x'beta)` maximising the `weights`-weighted likelihood.
///
/// Rows with zero weight are ignored. Returns `None` if the normal equations cannot be solved.
pub fn fit_weighted_logistic(x: &DMatrix<f64>, y: &[f64], weights: &[f64]) -> Option<LogisticFit> {
    let rows: Vec<usize> = (0..y.len()).filter(|&i| weights[i] > 0.0).collect();
    fit_rows(x, y, weights, &rows)
}

pub(crate) fn fit_rows(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    rows: &[usize],
) -> Option<LogisticFit> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let mut dev = weighted_deviance(x, y, weights, rows, &beta);
    let mut converged = false;
    let mut separated = false;
    let mut iterations = 0;

    for it in 1..=MAX_IRLS_ITER {
        iterations = it;
        let (info, score) = information(x, y, weights, rows, &beta);
        let step = solve_spd(&info, &score)?;
        let mut t = 1.0;
        let mut candidate;
        let mut cand_dev;
        loop {
            candidate = &beta + &step * t;
            clip(&mut candidate);
            cand_dev = weighted_deviance(x, y, weights, rows, &candidate);
            if cand_dev <= dev + 1e-12 * (1.0 + dev.abs()) || t < 1e-4 {
                break;
            }
            t *= 0.5;
        }
        let change = (&candidate - &beta).amax();
        let dev_change = (dev - cand_dev).abs();
        beta = candidate;
        dev = cand_dev;
        separated = beta.iter().any(|b| b.abs() >= COEF_CLIP);
        if change < TOL * (1.0 + beta.amax()) || dev_change < 1e-14 * (1.0 + dev.abs()) {
            converged = true;
            break;
        }
    }
    // Complete separation can drive the deviance to its floor before any coefficient hits the clip.
    separated |= rows.iter().all(|&i| (y[i] - sigmoid(x.row(i).dot(&beta.transpose()))).abs() < 1e-6);
    let (info, _) = information(x, y, weights, rows, &beta);
    let covariance = invert_spd(&info)?;
    Some(LogisticFit { beta, covariance, converged, separated, iterations })
}

fn clip(beta: &mut DVector<f64>) {
    for b in beta.iter_mut() {
        *b = b.clamp(-COEF_CLIP, COEF_CLIP);
    }
}

fn weighted_deviance(x: &DMatrix<f64>, y: &[f64], w: &[f64], rows: &[usize], beta: &DVector<f64>) -> f64 {
    let mut d = 0.0;
    for &i in rows {
        let eta = x.row(i).dot(&beta.transpose());
        d -= 2.0 * w[i] * log_lik(y[i], sigmoid(eta));
    }
    d
}

/// Fisher information `X'WAX + ridge` and score `X'W(y - mu)`.
fn information(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    rows: &[usize],
    beta: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = x.ncols();
    let mut info = DMatrix::zeros(p, p);
    let mut score = DVector::zeros(p);
    for &i in rows {
        let xi = x.row(i);
        let mu = sigmoid(xi.dot(&beta.transpose()));
        let a = w[i] * (mu * (1.0 - mu)).max(MIN_VARIANCE);
        let r = w[i] * (y[i] - mu);
        for j in 0..p {
            score[j] += xi[j] * r;
            let axj = a * xi[j];
            for k in 0..=j {
                info[(j, k)] += axj * xi[k];
            }
        }
    }
    for j in 0..p {
        info[(j, j)] += RIDGE;
        for k in 0..j {
            info[(k, j)] = info[(j, k)];
        }
    }
    (info, score)
}

pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    a.clone().lu().solve(b)
}

pub(crate) fn invert_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.inverse());
    }
    a.clone().try_inverse()
}

//! Histogram gradient-boosted trees with logistic loss.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::logistic::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub max_depth: usize,
    pub n_estimators: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    /// At most 256.
    pub max_bins: usize,
    /// Row fraction sampled per tree.
    pub subsample: f64,
    /// Feature fraction sampled per tree.
    pub colsample: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            max_depth: 10,
            n_estimators: 100,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
            max_bins: 64,
            subsample: 1.0,
            colsample: 1.0,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_depth == 0 || self.n_estimators == 0 {
            return bad("max_depth and n_estimators must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return bad("lambda and min_child_weight must be non-negative");
        }
        if !(2..=256).contains(&self.max_bins) {
            return bad("max_bins must be in 2..=256");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) || !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return bad("subsample and colsample must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if row(feature) <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub params: GbdtParams,
    pub n_features: usize,
    /// Initial margin (prior log-odds).
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

impl Gbdt {
    /// Raw margin for row `i` of column-major `columns`.
    pub fn margin(&self, columns: &[Vec<f64>], i: usize) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(|f| columns[f][i])).sum::<f64>()
    }

    /// `P(y = 1)` for every row of column-major `columns`.
    pub fn predict_proba(&self, columns: &[Vec<f64>]) -> Result<Vec<f64>> {
        if columns.len() != self.n_features {
            return Err(Error::invalid(format!(
                "model expects {} features, got {}",
                self.n_features,
                columns.len()
            )));
        }
        let n = columns.first().map_or(0, Vec::len);
        Ok((0..n).into_par_iter().map(|i| sigmoid(self.margin(columns, i))).collect())
    }
}

/// Cut points such that bin `b` holds values in `(cuts[b-1], cuts[b]]`.
fn cut_points(values: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq = sorted.clone();
    uniq.dedup();
    if uniq.len() <= max_bins {
        return uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = (1..max_bins)
        .map(|q| sorted[(q * (n - 1)) / max_bins])
        .collect();
    cuts.dedup();
    let max = *uniq.last().expect("non-empty");
    cuts.retain(|&c| c < max);
    cuts
}

fn bin_of(cuts: &[f64], v: f64) -> u8 {
    cuts.partition_point(|&c| c < v) as u8
}

#[derive(Clone, Copy, Default)]
struct Stat {
    g: f64,
    h: f64,
}

struct Trainer<'a> {
    bins: &'a [Vec<u8>],
    cuts: &'a [Vec<f64>],
    grad: Vec<f64>,
    hess: Vec<f64>,
    params: &'a GbdtParams,
    features: Vec<usize>,
}

struct Candidate {
    gain: f64,
    feature: usize,
    bin: usize,
}

impl Trainer<'_> {
    fn histogram(&self, feature: usize, rows: &[usize]) -> Vec<Stat> {
        let mut h = vec![Stat::default(); self.cuts[feature].len() + 1];
        let col = &self.bins[feature];
        for &i in rows {
            let s = &mut h[col[i] as usize];
            s.g += self.grad[i];
            s.h += self.hess[i];
        }
        h
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn best_split(&self, hists: &[Vec<Stat>], total: Stat) -> Option<Candidate> {
        let per_feature: Vec<Option<Candidate>> = self
            .features
            .par_iter()
            .zip(hists.par_iter())
            .map(|(&f, hist)| {
                let mut best: Option<Candidate> = None;
                let mut left = Stat::default();
                let parent = self.score(total.g, total.h);
                for (b, s) in hist.iter().enumerate().take(hist.len().saturating_sub(1)) {
                    left.g += s.g;
                    left.h += s.h;
                    let (rg, rh) = (total.g - left.g, total.h - left.h);
                    if left.h < self.params.min_child_weight || rh < self.params.min_child_weight {
                        continue;
                    }
                    let gain = 0.5 * (self.score(left.g, left.h) + self.score(rg, rh) - parent);
                    if best.as_ref().is_none_or(|c| gain > c.gain) {
                        best = Some(Candidate { gain, feature: f, bin: b });
                    }
                }
                best
            })
            .collect();
        // Sequential reduction keeps the lowest feature on ties.
        let mut best: Option<Candidate> = None;
        for c in per_feature.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| c.gain > b.gain) {
                best = Some(c);
            }
        }
        best.filter(|c| c.gain > 1e-12)
    }

    fn leaf(&self, total: Stat) -> Node {
        Node::Leaf { value: -total.g / (total.h + self.params.lambda) * self.params.learning_rate }
    }

    fn grow(&self, nodes: &mut Vec<Node>, rows: Vec<usize>, hists: Vec<Vec<Stat>>, depth: usize) -> usize {
        let total = hists.first().map_or(Stat::default(), |h| {
            h.iter().fold(Stat::default(), |a, s| Stat { g: a.g + s.g, h: a.h + s.h })
        });
        let id = nodes.len();
        nodes.push(self.leaf(total));
        if depth >= self.params.max_depth || rows.len() < 2 || self.features.is_empty() {
            return id;
        }
        let Some(c) = self.best_split(&hists, total) else { return id };
        let col = &self.bins[c.feature];
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| (col[i] as usize) <= c.bin);
        // Histogram subtraction: build the smaller child, derive the larger.
        let (small, small_is_left) = if left.len() <= right.len() { (&left, true) } else { (&right, false) };
        let small_h: Vec<Vec<Stat>> = self.features.iter().map(|&f| self.histogram(f, small)).collect();
        let large_h: Vec<Vec<Stat>> = hists
            .iter()
            .zip(&small_h)
            .map(|(p, s)| p.iter().zip(s).map(|(a, b)| Stat { g: a.g - b.g, h: a.h - b.h }).collect())
            .collect();
        let (lh, rh) = if small_is_left { (small_h, large_h) } else { (large_h, small_h) };
        let l = self.grow(nodes, left, lh, depth + 1);
        let r = self.grow(nodes, right, rh, depth + 1);
        nodes[id] = Node::Split {
            feature: c.feature,
            threshold: self.cuts[c.feature][c.bin],
            left: l,
            right: r,
        };
        id
    }
}

/// Fits boosted trees to binary `y` from column-major `columns`.
pub fn fit_gbdt(columns: &[Vec<f64>], y: &[f64], params: &GbdtParams) -> Result<Gbdt> {
    params.validate()?;
    let n = y.len();
    if n == 0 {
        return Err(Error::invalid("no training rows"));
    }
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("feature columns and labels differ in length"));
    }
    if columns.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let p = columns.len();
    let cuts: Vec<Vec<f64>> = columns.par_iter().map(|c| cut_points(c, params.max_bins)).collect();
    let bins: Vec<Vec<u8>> = columns
        .par_iter()
        .zip(&cuts)
        .map(|(c, k)| c.iter().map(|&v| bin_of(k, v)).collect())
        .collect();

    let mean = y.iter().sum::<f64>() / n as f64;
    let base_score = (mean.clamp(1e-6, 1.0 - 1e-6) / (1.0 - mean.clamp(1e-6, 1.0 - 1e-6))).ln();
    let mut margin = vec![base_score; n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trees = Vec::with_capacity(params.n_estimators);

    for _ in 0..params.n_estimators {
        let (grad, hess): (Vec<f64>, Vec<f64>) = margin
            .iter()
            .zip(y)
            .map(|(&m, &t)| {
                let q = sigmoid(m);
                (q - t, (q * (1.0 - q)).max(1e-16))
            })
            .unzip();
        let rows: Vec<usize> = if params.subsample < 1.0 {
            let k = ((params.subsample * n as f64).round() as usize).max(1);
            let mut r = sample(&mut rng, n, k).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let features: Vec<usize> = if params.colsample < 1.0 {
            let k = ((params.colsample * p as f64).round() as usize).max(1);
            let mut f = sample(&mut rng, p, k).into_vec();
            f.sort_unstable();
            f
        } else {
            (0..p).collect()
        };
        let trainer = Trainer { bins: &bins, cuts: &cuts, grad, hess, params, features };
        let hists: Vec<Vec<Stat>> =
            trainer.features.par_iter().map(|&f| trainer.histogram(f, &rows)).collect();
        let mut nodes = Vec::new();
        trainer.grow(&mut nodes, rows, hists, 0);
        let tree = Tree { nodes };
        for (i, m) in margin.iter_mut().enumerate() {
            *m += tree.predict(|f| columns[f][i]);
        }
        trees.push(tree);
    }
    Ok(Gbdt { params: *params, n_features: p, base_score, trees })
}

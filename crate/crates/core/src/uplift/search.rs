//! Feature-subset search by validation AUUC and permutation importance.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curve::{f1_area, uplift_curve};
use super::{fit_base_learner, predict_tau, GbdtParams, UpliftDataset, UpliftModel};
use crate::error::{Error, Result};
use crate::stats::{mean, pearson, std_dev};

pub const MIN_BUDGET: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrial {
    pub trial: usize,
    pub mask: Vec<usize>,
    pub auuc: f64,
    /// The mask was already scored by an earlier trial.
    pub repeated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub selected: Vec<usize>,
    pub selected_names: Vec<String>,
    pub auuc: f64,
    /// Every mask in the space was scored.
    pub exhaustive: bool,
    pub trials: Vec<SelectionTrial>,
}

fn mask_indices(bits: u64, p: usize) -> Vec<usize> {
    (0..p).filter(|&j| bits >> j & 1 == 1).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, p: usize) -> Vec<usize> {
    loop {
        let m: Vec<usize> = (0..p).filter(|_| rng.random::<bool>()).collect();
        if !m.is_empty() {
            return m;
        }
    }
}

/// Searches feature subsets for the highest validation AUUC.
///
/// `data` is split in half with `seed`: models are fitted on one half and scored on the other.
/// When every non-empty mask fits in `budget` the search is exhaustive; otherwise each trial
/// includes every feature independently with probability 1/2.
pub fn select_features(
    data: &UpliftDataset,
    budget: usize,
    params: &GbdtParams,
    seed: u64,
) -> Result<FeatureSelection> {
    if budget < MIN_BUDGET {
        return Err(Error::invalid(format!("feature search budget must be at least {MIN_BUDGET}")));
    }
    let p = data.p();
    if p < 2 {
        return Err(Error::precondition("feature search needs at least 2 candidate features"));
    }
    let halves = data.split(&[0.5, 0.5], seed);
    let (fit, val) = (&halves[0], &halves[1]);

    let exhaustive = p < 63 && (1u64 << p) - 1 <= budget as u64;
    let masks: Vec<Vec<usize>> = if exhaustive {
        (1..(1u64 << p)).map(|b| mask_indices(b, p)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..budget).map(|_| random_mask(&mut rng, p)).collect()
    };

    let mut first_seen: HashMap<&[usize], usize> = HashMap::new();
    let mut unique: Vec<&[usize]> = Vec::new();
    for m in &masks {
        if !first_seen.contains_key(m.as_slice()) {
            first_seen.insert(m, unique.len());
            unique.push(m);
        }
    }
    let scores: Vec<f64> = unique
        .par_iter()
        .map(|m| -> Result<f64> {
            let model = fit_base_learner(fit, Some(m), params)?;
            let tau = predict_tau(&model, val)?;
            Ok(uplift_curve(&tau, &val.treatment, &val.revisit, seed)?.auuc)
        })
        .collect::<Result<_>>()?;

    let mut seen = vec![false; unique.len()];
    let mut trials = Vec::with_capacity(masks.len());
    for (t, m) in masks.iter().enumerate() {
        let u = first_seen[m.as_slice()];
        trials.push(SelectionTrial { trial: t, mask: m.clone(), auuc: scores[u], repeated: seen[u] });
        seen[u] = true;
    }
    let best = trials
        .iter()
        .fold(None::<&SelectionTrial>, |b, t| match b {
            Some(b) if b.auuc >= t.auuc => Some(b),
            _ => Some(t),
        })
        .expect("at least one trial");
    Ok(FeatureSelection {
        selected: best.mask.clone(),
        selected_names: best.mask.iter().map(|&j| data.feature_names[j].clone()).collect(),
        auuc: best.auuc,
        exhaustive,
        trials,
    })
}

/// Bootstrap resamples of the evaluation rows behind [`FeatureImportance::std_err`].
pub const IMPORTANCE_BOOTSTRAP: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub index: usize,
    /// Mean AUUC drop when the column is permuted.
    pub importance: f64,
    /// Bootstrap standard error over evaluation rows, permutation repeats included.
    pub std_err: f64,
    /// Pearson correlation between the feature and the predicted lift.
    pub sign: f64,
    pub used: bool,
}

/// Permutation importance of every input feature on `data`.
///
/// Features the model does not use get importance 0 without permuting. The standard error
/// resamples evaluation rows, so it reflects how much the drop depends on the particular
/// evaluation sample and not only on the permutation draws.
pub fn permutation_importance(
    model: &UpliftModel,
    data: &UpliftDataset,
    repeats: usize,
    seed: u64,
) -> Result<Vec<FeatureImportance>> {
    if repeats == 0 {
        return Err(Error::invalid("at least one repeat is required"));
    }
    let n = data.n();
    let tau = predict_tau(model, data)?;
    // Checks both arms; the random baseline is shared, so AUUC drops equal model-curve drops.
    uplift_curve(&tau, &data.treatment, &data.revisit, seed)?;
    let all: Vec<usize> = (0..n).collect();
    let mut boot_rng = ChaCha8Rng::seed_from_u64(seed);
    boot_rng.set_stream(0);
    let boots: Vec<Vec<usize>> = (0..IMPORTANCE_BOOTSTRAP)
        .map(|_| (0..n).map(|_| boot_rng.random_range(0..n)).collect())
        .collect();
    let area = |s: &[f64], rows: &[usize]| f1_area(s, &data.treatment, &data.revisit, rows);
    let base_full = area(&tau, &all);
    let base_boot: Vec<f64> = boots.iter().map(|b| area(&tau, b)).collect();

    let results: Vec<FeatureImportance> = (0..data.p())
        .into_par_iter()
        .map(|j| -> Result<FeatureImportance> {
            let used = model.selected.contains(&j);
            let sign = pearson(&data.columns[j], &tau);
            if !used {
                return Ok(FeatureImportance {
                    feature: data.feature_names[j].clone(),
                    index: j,
                    importance: 0.0,
                    std_err: 0.0,
                    sign,
                    used,
                });
            }
            let mut full = Vec::with_capacity(repeats);
            let mut boot = vec![0.0; boots.len()];
            for r in 0..repeats {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((j * repeats + r) as u64 + 1);
                let mut shuffled = data.clone();
                shuffled.columns[j].shuffle(&mut rng);
                let t = predict_tau(model, &shuffled)?;
                full.push(base_full - area(&t, &all));
                for (acc, (b, base)) in boot.iter_mut().zip(boots.iter().zip(&base_boot)) {
                    *acc += (base - area(&t, b)) / repeats as f64;
                }
            }
            Ok(FeatureImportance {
                feature: data.feature_names[j].clone(),
                index: j,
                importance: mean(&full),
                std_err: std_dev(&boot),
                sign,
                used,
            })
        })
        .collect::<Result<_>>()?;
    Ok(results)
}

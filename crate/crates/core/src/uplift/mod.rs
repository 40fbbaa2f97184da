//! Uplift modelling by class-variable transformation on boosted trees.
//!
//! The label `Z` is 1 when a treated user revisits or an untreated user does not. Under
//! balanced random assignment `tau(x) = 2 P(Z = 1 | x) - 1`.

mod curve;
mod features;
mod gbdt;
mod search;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use curve::{auuc_permutation_test, uplift_curve, PermutationTest, UpliftCurve, CURVE_POINTS, SHUFFLES};
pub use features::{build_uplift_dataset, FeatureInputs, HOME_DISTANCE_FEATURE};
pub use gbdt::{fit_gbdt, Gbdt, GbdtParams, Node, Tree};
pub use search::{
    permutation_importance, select_features, FeatureImportance, FeatureSelection, SelectionTrial,
    IMPORTANCE_BOOTSTRAP, MIN_BUDGET,
};

use crate::error::{Error, Result};

/// Accepted share of treated rows for the transformation to hold.
pub const TREATMENT_SHARE_RANGE: (f64, f64) = (0.4, 0.6);

/// Format tag written into serialized models.
pub const MODEL_FORMAT: &str = "o2o-uplift-model";
pub const MODEL_VERSION: u32 = 1;

/// `Z` for one row.
pub fn z_label(treated: bool, revisit: bool) -> bool {
    treated == revisit
}

/// `Z` from 0/1 codes; anything else is an error.
pub fn z_transform(treatment: &[u8], revisit: &[u8]) -> Result<Vec<u8>> {
    if treatment.len() != revisit.len() {
        return Err(Error::invalid("treatment and revisit lengths differ"));
    }
    treatment
        .iter()
        .zip(revisit)
        .enumerate()
        .map(|(i, (&t, &r))| {
            if t > 1 || r > 1 {
                Err(Error::invalid(format!("row {i}: treatment and revisit must be 0 or 1")))
            } else {
                Ok(u8::from(t == r))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftDataset {
    pub feature_names: Vec<String>,
    /// Column-major features.
    pub columns: Vec<Vec<f64>>,
    pub treatment: Vec<bool>,
    pub revisit: Vec<bool>,
    /// Optional row identifiers.
    pub ids: Vec<String>,
}

impl UpliftDataset {
    pub fn new(
        feature_names: Vec<String>,
        columns: Vec<Vec<f64>>,
        treatment: Vec<bool>,
        revisit: Vec<bool>,
    ) -> Result<Self> {
        let n = treatment.len();
        if revisit.len() != n {
            return Err(Error::invalid("treatment and revisit lengths differ"));
        }
        if feature_names.len() != columns.len() {
            return Err(Error::invalid("feature names and columns differ in count"));
        }
        if let Some((j, _)) = columns.iter().enumerate().find(|(_, c)| c.len() != n) {
            return Err(Error::invalid(format!("feature {} has the wrong length", feature_names[j])));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features must be finite"));
        }
        let ids = (0..n).map(|i| i.to_string()).collect();
        Ok(Self { feature_names, columns, treatment, revisit, ids })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n() {
            return Err(Error::invalid("id count differs from row count"));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.treatment.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn z(&self) -> Vec<bool> {
        self.treatment.iter().zip(&self.revisit).map(|(&t, &r)| z_label(t, r)).collect()
    }

    pub fn treatment_share(&self) -> f64 {
        self.treatment.iter().filter(|&&t| t).count() as f64 / self.n().max(1) as f64
    }

    pub fn rows(&self, idx: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            columns: self.columns.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            revisit: idx.iter().map(|&i| self.revisit[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Seeded split into parts with the given fractions, stratified by treatment arm so every
    /// part keeps the overall treatment share. Rows keep their original order within a part.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: f64 = fractions.iter().sum();
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
        for arm in [true, false] {
            let mut order: Vec<usize> = (0..self.n()).filter(|&i| self.treatment[i] == arm).collect();
            order.shuffle(&mut rng);
            let m = order.len();
            let mut start = 0;
            let mut acc = 0.0;
            for (k, f) in fractions.iter().enumerate() {
                acc += f;
                let end = if k + 1 == fractions.len() { m } else { ((acc / total) * m as f64).round() as usize };
                parts[k].extend_from_slice(&order[start..end]);
                start = end;
            }
        }
        parts
            .into_iter()
            .map(|mut idx| {
                idx.sort_unstable();
                self.rows(&idx)
            })
            .collect()
    }
}

/// Default feature-selection / training / evaluation proportions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.4, 0.3, 0.3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftModel {
    pub format: String,
    pub version: u32,
    /// Feature names of the dataset the model was trained on.
    pub input_features: Vec<String>,
    /// Indices into `input_features` used by the learner.
    pub selected: Vec<usize>,
    pub learner: Gbdt,
    pub train_rows: usize,
    pub train_treatment_share: f64,
}

impl UpliftModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }

    pub fn selected_names(&self) -> Vec<&str> {
        self.selected.iter().map(|&j| self.input_features[j].as_str()).collect()
    }
}

fn check_balance(data: &UpliftDataset) -> Result<()> {
    let share = data.treatment_share();
    let (lo, hi) = TREATMENT_SHARE_RANGE;
    if !(lo..=hi).contains(&share) {
        return Err(Error::precondition(format!(
            "treatment share {share:.3} is outside [{lo}, {hi}]; the Z transformation assumes \
             balanced random assignment"
        )));
    }
    Ok(())
}

/// Fits `P(Z = 1 | x)` on the columns in `selected` (all columns when `None`).
pub fn fit_base_learner(
    data: &UpliftDataset,
    selected: Option<&[usize]>,
    params: &GbdtParams,
) -> Result<UpliftModel> {
    check_balance(data)?;
    let z = data.z();
    if z.iter().all(|&v| v) || z.iter().all(|&v| !v) {
        return Err(Error::precondition("both Z classes must be present"));
    }
    let selected: Vec<usize> = match selected {
        Some(s) => s.to_vec(),
        None => (0..data.p()).collect(),
    };
    if selected.is_empty() || selected.iter().any(|&j| j >= data.p()) {
        return Err(Error::invalid("selected features must be a non-empty set of valid indices"));
    }
    let cols: Vec<Vec<f64>> = selected.iter().map(|&j| data.columns[j].clone()).collect();
    let y: Vec<f64> = z.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let learner = fit_gbdt(&cols, &y, params)?;
    Ok(UpliftModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input_features: data.feature_names.clone(),
        selected,
        learner,
        train_rows: data.n(),
        train_treatment_share: data.treatment_share(),
    })
}

/// `P(Z = 1 | x)` per row of `data`.
pub fn predict_proba(model: &UpliftModel, data: &UpliftDataset) -> Result<Vec<f64>> {
    if data.p() != model.input_features.len() {
        return Err(Error::invalid(format!(
            "model expects {} input features, dataset has {}",
            model.input_features.len(),
            data.p()
        )));
    }
    let cols: Vec<Vec<f64>> = model.selected.iter().map(|&j| data.columns[j].clone()).collect();
    model.learner.predict_proba(&cols)
}

/// `tau = 2 P - 1`.
pub fn tau_from_probability(p: f64) -> f64 {
    2.0 * p - 1.0
}

/// Estimated lift `2 P(Z = 1 | x) - 1` per row.
pub fn predict_tau(model: &UpliftModel, data: &UpliftDataset) -> Result<Vec<f64>> {
    Ok(predict_proba(model, data)?.into_iter().map(tau_from_probability).collect())
}

//! Synthetic O2O experiments with planted effects.
//!
//! [`generate`] produces ping, place, assignment, campaign and demographic tables in the exact
//! ingestion formats, plus a [`GroundTruth`] that only tests should read. [`simulate_uplift`] and
//! [`simulate_tables`] draw the same outcome model without trajectories, for oracle checks that
//! need many rows or many repetitions.

mod world;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::revisit::CampaignTable;
use crate::trajectory::{Assignment, Campaign, LocationRecord, Place};
use crate::uplift::{UpliftDataset, HOME_DISTANCE_FEATURE};

pub use world::generate;

/// Per-campaign odds ratio of revisiting, treated versus control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OddsRatioSpec {
    Fixed(f64),
    /// Drawn once per campaign.
    LogNormal { median: f64, sigma: f64 },
    /// Assigned to campaigns in turn.
    Values(Vec<f64>),
}

/// Heterogeneous lift: users in the top `responder_share` of `feature` get `responder_tau`
/// added to their treated revisit probability, everyone else `other_tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSpec {
    pub feature: String,
    pub responder_share: f64,
    pub responder_tau: f64,
    pub other_tau: f64,
}

impl Default for TauSpec {
    fn default() -> Self {
        TauSpec {
            feature: HOME_DISTANCE_FEATURE.into(),
            responder_share: 0.6,
            responder_tau: 0.15,
            other_tau: -0.1,
        }
    }
}

fn d_campaigns() -> usize {
    31
}
fn d_users() -> usize {
    100
}
fn d_half() -> f64 {
    0.5
}
fn d_non_visitor() -> f64 {
    0.05
}
fn d_offset() -> i64 {
    9 * 3600
}
fn d_campaign_days() -> i64 {
    30
}
fn d_stagger() -> i64 {
    7
}
fn d_nearby() -> usize {
    40
}
fn d_city() -> usize {
    150
}
fn d_history() -> usize {
    7
}
fn d_home() -> [f64; 2] {
    [0.2, 4.0]
}
fn d_base() -> [f64; 2] {
    [15.0, 25.0]
}
fn d_day_sd() -> f64 {
    1.5
}
fn d_effect() -> f64 {
    2.4
}
fn d_ring() -> f64 {
    1000.0
}
fn d_ring_strength() -> f64 {
    0.8
}
fn d_base_rate() -> f64 {
    0.3
}
fn d_or() -> OddsRatioSpec {
    OddsRatioSpec::Fixed(1.5)
}
fn d_window() -> i64 {
    120
}
fn d_tau() -> Option<TauSpec> {
    Some(TauSpec::default())
}
fn d_demographics() -> Vec<String> {
    ["p_female", "p_age_20s", "p_age_30s", "p_age_40s", "p_married"]
        .map(String::from)
        .to_vec()
}

/// Simulator parameters. Only `seed` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    #[serde(default = "d_campaigns")]
    pub n_campaigns: usize,
    #[serde(default = "d_users")]
    pub users_per_campaign: usize,
    #[serde(default = "d_half")]
    pub treatment_share: f64,
    /// Share of assigned users who never visit the target shop.
    #[serde(default = "d_non_visitor")]
    pub non_visitor_share: f64,
    /// Local time minus UTC, seconds.
    #[serde(default = "d_offset")]
    pub day_offset_s: i64,
    #[serde(default = "d_campaign_days")]
    pub campaign_days: i64,
    /// Days between consecutive campaign starts.
    #[serde(default = "d_stagger")]
    pub campaign_stagger_days: i64,
    /// Places within 2 km of each target shop.
    #[serde(default = "d_nearby")]
    pub nearby_places: usize,
    /// Shopping places spread over the whole region.
    #[serde(default = "d_city")]
    pub city_places: usize,
    /// Pre-experiment days per user with night pings and one shopping stop.
    #[serde(default = "d_history")]
    pub history_days: usize,
    #[serde(default = "d_home")]
    pub home_distance_km: [f64; 2],
    /// Range of the per-user baseline daily distance.
    #[serde(default = "d_base")]
    pub base_distance_km: [f64; 2],
    #[serde(default = "d_day_sd")]
    pub day_sd_km: f64,
    /// Added to treated users' daily distance after the first visit.
    #[serde(default = "d_effect")]
    pub distance_effect_km: f64,
    /// Added to treated users' daily distance on every day.
    #[serde(default)]
    pub confounder_km: f64,
    /// Aligned distance beyond which treated users dominate post-visit stops.
    #[serde(default = "d_ring")]
    pub ring_radius_m: f64,
    /// Probability that a post-visit stop lies on the group's side of the ring.
    #[serde(default = "d_ring_strength")]
    pub ring_strength: f64,
    #[serde(default = "d_base_rate")]
    pub revisit_base_rate: f64,
    #[serde(default = "d_or")]
    pub revisit_or: OddsRatioSpec,
    #[serde(default = "d_window")]
    pub revisit_window_days: i64,
    #[serde(default = "d_tau")]
    pub tau: Option<TauSpec>,
    /// Names of uniform(0, 1) demographic-probability columns.
    #[serde(default = "d_demographics")]
    pub demographics: Vec<String>,
}

impl SimConfig {
    pub fn new(seed: u64) -> Self {
        SimConfig {
            seed,
            n_campaigns: d_campaigns(),
            users_per_campaign: d_users(),
            treatment_share: d_half(),
            non_visitor_share: d_non_visitor(),
            day_offset_s: d_offset(),
            campaign_days: d_campaign_days(),
            campaign_stagger_days: d_stagger(),
            nearby_places: d_nearby(),
            city_places: d_city(),
            history_days: d_history(),
            home_distance_km: d_home(),
            base_distance_km: d_base(),
            day_sd_km: d_day_sd(),
            distance_effect_km: d_effect(),
            confounder_km: 0.0,
            ring_radius_m: d_ring(),
            ring_strength: d_ring_strength(),
            revisit_base_rate: d_base_rate(),
            revisit_or: d_or(),
            revisit_window_days: d_window(),
            tau: d_tau(),
            demographics: d_demographics(),
        }
    }

    /// Names of the per-user feature columns: demographics, then home distance.
    pub fn feature_names(&self) -> Vec<String> {
        let mut v = self.demographics.clone();
        v.push(HOME_DISTANCE_FEATURE.into());
        v
    }

    /// Checks ranges and probability feasibility.
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is not a probability")))
            }
        };
        prob("treatment_share", self.treatment_share)?;
        prob("non_visitor_share", self.non_visitor_share)?;
        prob("ring_strength", self.ring_strength)?;
        prob("revisit_base_rate", self.revisit_base_rate)?;
        if self.treatment_share == 0.0 || self.treatment_share == 1.0 {
            return Err(Error::Config("treatment_share must leave both arms non-empty".into()));
        }
        if self.n_campaigns == 0 || self.users_per_campaign == 0 {
            return Err(Error::Config("n_campaigns and users_per_campaign must be positive".into()));
        }
        if self.nearby_places < 2 || self.city_places == 0 {
            return Err(Error::Config("need at least 2 nearby places and 1 city place".into()));
        }
        let finite = [
            self.day_sd_km,
            self.distance_effect_km,
            self.confounder_km,
            self.ring_radius_m,
            self.home_distance_km[0],
            self.home_distance_km[1],
            self.base_distance_km[0],
            self.base_distance_km[1],
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("effects and distances must be finite".into()));
        }
        let [h0, h1] = self.home_distance_km;
        let [b0, b1] = self.base_distance_km;
        if !(0.1 <= h0 && h0 <= h1 && h1 <= 10.0) {
            return Err(Error::Config("home_distance_km must satisfy 0.1 <= lo <= hi <= 10".into()));
        }
        if !(0.0 < b0 && b0 <= b1) || self.day_sd_km < 0.0 {
            return Err(Error::Config("base_distance_km must be an increasing positive range".into()));
        }
        if !(0.0 < self.ring_radius_m && self.ring_radius_m < world::NEARBY_RADIUS_M) {
            return Err(Error::Config(format!(
                "ring_radius_m must lie in (0, {})",
                world::NEARBY_RADIUS_M
            )));
        }
        if self.campaign_days < 1 || self.campaign_stagger_days < 0 || self.revisit_window_days < 1 {
            return Err(Error::Config("campaign and revisit windows must be positive".into()));
        }
        match &self.revisit_or {
            OddsRatioSpec::Fixed(v) => check_or(*v)?,
            OddsRatioSpec::Values(v) if v.is_empty() => {
                return Err(Error::Config("revisit_or values must not be empty".into()))
            }
            OddsRatioSpec::Values(v) => v.iter().try_for_each(|&x| check_or(x))?,
            OddsRatioSpec::LogNormal { median, sigma } => {
                check_or(*median)?;
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::Config("revisit_or sigma must be non-negative".into()));
                }
            }
        }
        if let Some(t) = &self.tau {
            if !self.feature_names().contains(&t.feature) {
                return Err(Error::Config(format!("tau feature `{}` is not simulated", t.feature)));
            }
            prob("tau.responder_share", t.responder_share)?;
            if !(t.responder_tau.is_finite() && t.other_tau.is_finite()) {
                return Err(Error::Config("tau values must be finite".into()));
            }
        }
        let fixed: Option<Vec<f64>> = match &self.revisit_or {
            OddsRatioSpec::Fixed(v) => Some(vec![*v]),
            OddsRatioSpec::Values(v) => Some(v.clone()),
            OddsRatioSpec::LogNormal { .. } => None,
        };
        for or in fixed.into_iter().flatten() {
            self.treated_probability(or, 0.0)?;
            if let Some(t) = &self.tau {
                self.treated_probability(or, t.responder_tau)?;
                self.treated_probability(or, t.other_tau)?;
            }
        }
        Ok(())
    }

    /// Treated revisit probability for a campaign odds ratio plus an additive lift.
    fn treated_probability(&self, odds_ratio: f64, lift: f64) -> Result<f64> {
        let p0 = self.revisit_base_rate;
        let odds = p0 / (1.0 - p0) * odds_ratio;
        let p = if odds.is_infinite() { 1.0 } else { odds / (1.0 + odds) } + lift;
        if (0.0..=1.0).contains(&p) {
            Ok(p)
        } else {
            Err(Error::Config(format!(
                "infeasible revisit probability {p:.3}: base rate {p0} with odds ratio {odds_ratio} \
                 and lift {lift} leaves [0, 1]"
            )))
        }
    }
}

fn check_or(v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("odds ratio {v} must be positive and finite")))
    }
}

/// What was planted for one simulated user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub campaign_id: String,
    pub treated: bool,
    /// Made a first visit to the target shop.
    pub visitor: bool,
    /// Feature values in [`SimConfig::feature_names`] order.
    pub features: Vec<f64>,
    pub responder: bool,
    pub p_control: f64,
    pub p_treated: f64,
    /// `p_treated - p_control`.
    pub tau: f64,
    pub revisit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub beta_distance_km: f64,
    pub confounder_km: f64,
    pub ring_radius_m: f64,
    pub dominance_rule: String,
    pub feature_names: Vec<String>,
    /// Planted odds ratio per campaign, before any additive lift.
    pub campaign_or: BTreeMap<String, f64>,
    /// Feature value at or above which users are responders.
    pub tau_threshold: Option<f64>,
    /// Panel and revisit days whose distance had to be raised to fit their stops.
    pub clamped_days: usize,
    pub users: BTreeMap<String, UserTruth>,
}

/// A generated experiment.
#[derive(Clone, Debug)]
pub struct SimData {
    pub records: Vec<LocationRecord>,
    pub places: Vec<Place>,
    pub assignments: Vec<Assignment>,
    pub campaigns: Vec<Campaign>,
    pub demographic_names: Vec<String>,
    pub demographics: BTreeMap<String, Vec<f64>>,
    pub truth: GroundTruth,
}

/// File names written by [`SimData::write_dir`].
pub const PINGS_FILE: &str = "pings.csv";
pub const PLACES_FILE: &str = "places.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const CAMPAIGNS_FILE: &str = "campaigns.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const TRUTH_FILE: &str = "ground_truth.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::File { path: path.to_path_buf(), source })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl SimData {
    /// Writes every table and the ground truth into `dir`, returning the paths.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|source| Error::File { path: dir.into(), source })?;
        let p = |f: &str| dir.join(f);
        write_csv(&p(PINGS_FILE), &self.records)?;
        write_csv(&p(PLACES_FILE), &self.places)?;
        write_csv(&p(ASSIGNMENTS_FILE), &self.assignments)?;
        write_csv(&p(CAMPAIGNS_FILE), &self.campaigns)?;

        let mut w = csv::Writer::from_writer(create(&p(DEMOGRAPHICS_FILE))?);
        let mut header = vec!["user_id".to_string()];
        header.extend(self.demographic_names.iter().cloned());
        w.write_record(&header)?;
        for (user, values) in &self.demographics {
            let mut row = vec![user.clone()];
            row.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut f = create(&p(TRUTH_FILE))?;
        serde_json::to_writer_pretty(&mut f, &self.truth)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok([PINGS_FILE, PLACES_FILE, ASSIGNMENTS_FILE, CAMPAIGNS_FILE, DEMOGRAPHICS_FILE, TRUTH_FILE]
            .iter()
            .map(|f| p(f))
            .collect())
    }
}

/// Independent sub-stream `stream` of the master seed.
pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Planted odds ratio per campaign index.
pub(crate) fn campaign_odds_ratios(cfg: &SimConfig) -> Result<Vec<f64>> {
    let mut rng = substream(cfg.seed, u64::MAX);
    (0..cfg.n_campaigns)
        .map(|c| match &cfg.revisit_or {
            OddsRatioSpec::Fixed(v) => Ok(*v),
            OddsRatioSpec::Values(v) => Ok(v[c % v.len()]),
            OddsRatioSpec::LogNormal { median, sigma } => LogNormal::new(median.ln(), *sigma)
                .map(|d| d.sample(&mut rng))
                .map_err(|e| Error::Config(format!("revisit_or: {e}"))),
        })
        .collect()
}

/// Demographics then home distance for one user.
pub(crate) fn draw_features(cfg: &SimConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut f: Vec<f64> = cfg.demographics.iter().map(|_| rng.random::<f64>()).collect();
    let [lo, hi] = cfg.home_distance_km;
    f.push(rng.random_range(lo..=hi));
    f
}

/// Smallest value such that the top `share` of `values` lie at or above it.
pub(crate) fn responder_threshold(values: &[f64], share: f64) -> f64 {
    if share <= 0.0 || values.is_empty() {
        return f64::INFINITY;
    }
    if share >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = (((1.0 - share) * v.len() as f64).round() as usize).min(v.len() - 1);
    v[idx]
}

/// Revisit probabilities and the responder flag for one user.
pub(crate) struct Outcome {
    pub p_control: f64,
    pub p_treated: f64,
    pub responder: bool,
}

pub(crate) fn outcome_model(
    cfg: &SimConfig,
    odds_ratio: f64,
    features: &[f64],
    threshold: Option<(usize, f64)>,
) -> Result<Outcome> {
    let (responder, lift) = match (&cfg.tau, threshold) {
        (Some(t), Some((j, thr))) => {
            let r = features[j] >= thr;
            (r, if r { t.responder_tau } else { t.other_tau })
        }
        _ => (false, 0.0),
    };
    Ok(Outcome {
        p_control: cfg.revisit_base_rate,
        p_treated: cfg.treated_probability(odds_ratio, lift)?,
        responder,
    })
}

/// Column index and threshold of the tau feature over a population of feature rows.
pub(crate) fn tau_threshold(cfg: &SimConfig, rows: &[&[f64]]) -> Option<(usize, f64)> {
    let t = cfg.tau.as_ref()?;
    let j = cfg.feature_names().iter().position(|n| *n == t.feature)?;
    let values: Vec<f64> = rows.iter().map(|r| r[j]).collect();
    Some((j, responder_threshold(&values, t.responder_share)))
}

/// Feature rows, treatment and revisit draws of the outcome model alone.
///
/// Row `i` belongs to campaign `i mod n_campaigns`. Row ids are `r000000`, `r000001`, ...
pub fn simulate_uplift(cfg: &SimConfig, n: usize) -> Result<(UpliftDataset, GroundTruth)> {
    cfg.validate()?;
    let ors = campaign_odds_ratios(cfg)?;
    let mut rng = substream(cfg.seed, 0);
    let feats: Vec<Vec<f64>> = (0..n).map(|_| draw_features(cfg, &mut rng)).collect();
    let rows: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    let thr = tau_threshold(cfg, &rows);

    let mut treatment = Vec::with_capacity(n);
    let mut revisit = Vec::with_capacity(n);
    let mut users = BTreeMap::new();
    for (i, f) in feats.iter().enumerate() {
        let c = i % cfg.n_campaigns;
        let o = outcome_model(cfg, ors[c], f, thr)?;
        let t = rng.random::<f64>() < cfg.treatment_share;
        let p = if t { o.p_treated } else { o.p_control };
        let r = rng.random::<f64>() < p;
        treatment.push(t);
        revisit.push(r);
        users.insert(
            format!("r{i:06}"),
            UserTruth {
                campaign_id: campaign_id(c),
                treated: t,
                visitor: true,
                features: f.clone(),
                responder: o.responder,
                p_control: o.p_control,
                p_treated: o.p_treated,
                tau: o.p_treated - o.p_control,
                revisit: r,
            },
        );
    }
    let names = cfg.feature_names();
    let columns = (0..names.len()).map(|j| feats.iter().map(|f| f[j]).collect()).collect();
    let data = UpliftDataset::new(names.clone(), columns, treatment, revisit)?
        .with_ids(users.keys().cloned().collect())?;
    let truth = GroundTruth {
        seed: cfg.seed,
        beta_distance_km: cfg.distance_effect_km,
        confounder_km: cfg.confounder_km,
        ring_radius_m: cfg.ring_radius_m,
        dominance_rule: dominance_rule(cfg),
        feature_names: names,
        campaign_or: ors.iter().enumerate().map(|(c, &v)| (campaign_id(c), v)).collect(),
        tau_threshold: thr.map(|(_, t)| t),
        clamped_days: 0,
        users,
    };
    Ok((data, truth))
}

/// One 2x2 revisit table per odds ratio, `n_per_arm` users in each arm.
pub fn simulate_tables(
    odds_ratios: &[f64],
    n_per_arm: u64,
    base_rate: f64,
    seed: u64,
) -> Result<Vec<CampaignTable>> {
    if !(0.0..=1.0).contains(&base_rate) {
        return Err(Error::Config(format!("base rate {base_rate} is not a probability")));
    }
    let mut rng = substream(seed, 0);
    odds_ratios
        .iter()
        .enumerate()
        .map(|(k, &or)| {
            check_or(or)?;
            let odds = base_rate / (1.0 - base_rate) * or;
            let p1 = odds / (1.0 + odds);
            let bin = |p: f64| Binomial::new(n_per_arm, p).map_err(|e| Error::Config(e.to_string()));
            let a = bin(p1)?.sample(&mut rng);
            let c = bin(base_rate)?.sample(&mut rng);
            Ok(CampaignTable::new(campaign_id(k), a, n_per_arm - a, c, n_per_arm - c))
        })
        .collect()
}

/// Mean planted lift per bucket.
///
/// `bucket_of` maps a user to its bucket or `None` to leave it out. Every key in `buckets` must
/// receive at least one user.
pub fn true_bucket_tau<K, F>(truth: &GroundTruth, buckets: &[K], bucket_of: F) -> Result<BTreeMap<K, f64>>
where
    K: Ord + Clone + std::fmt::Debug,
    F: Fn(&str, &UserTruth) -> Option<K>,
{
    let mut acc: BTreeMap<K, (f64, usize)> = buckets.iter().map(|k| (k.clone(), (0.0, 0))).collect();
    for (id, u) in &truth.users {
        if let Some(k) = bucket_of(id, u) {
            if let Some(e) = acc.get_mut(&k) {
                e.0 += u.tau;
                e.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(k, (s, n))| {
            if n == 0 {
                Err(Error::invalid(format!("bucket {k:?} is empty")))
            } else {
                Ok((k, s / n as f64))
            }
        })
        .collect()
}

pub(crate) fn campaign_id(c: usize) -> String {
    format!("c{:02}", c + 1)
}

pub(crate) fn dominance_rule(cfg: &SimConfig) -> String {
    format!("y = 1 iff aligned offset distance > {} m", cfg.ring_radius_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_splits_share() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        let t = responder_threshold(&v, 0.6);
        assert_eq!(v.iter().filter(|&&x| x >= t).count(), 6);
        assert_eq!(responder_threshold(&v, 0.0), f64::INFINITY);
    }

    #[test]
    fn infeasible_probability_is_rejected() {
        let mut cfg = SimConfig::new(1);
        cfg.revisit_base_rate = 0.9;
        cfg.revisit_or = OddsRatioSpec::Fixed(1.0);
        cfg.tau = Some(TauSpec { responder_tau: 0.2, ..TauSpec::default() });
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("infeasible"), "{err}");
    }

    #[test]
    fn toml_needs_seed() {
        assert!(toml::from_str::<SimConfig>("n_campaigns = 3").is_err());
        let c: SimConfig = toml::from_str("seed = 4\nrevisit_or = { values = [1.2, 2.0] }").unwrap();
        assert_eq!(c.revisit_or, OddsRatioSpec::Values(vec![1.2, 2.0]));
        assert!(toml::from_str::<SimConfig>("seed = 4\nbogus = 1").is_err());
    }
}

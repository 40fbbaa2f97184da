//! Per-campaign revisit tables, the direct induced-revisit effect and odds-ratio pooling.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::normal_critical;
use crate::trajectory::{
    first_target_visits, index_campaigns, local_day, Assignment, Campaign, FirstVisit, VisitEvent,
};

/// Revisit window in days after the first visit day; roughly four months.
pub const DEFAULT_WINDOW_DAYS: i64 = 120;

/// Added to every cell of a table that has a zero cell.
pub const ZERO_CELL_CORRECTION: f64 = 0.5;

/// 2×2 revisit counts over first-time visitors of one campaign.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignTable {
    pub campaign_id: String,
    /// Treated revisitors.
    pub a: u64,
    /// Treated non-revisitors.
    pub b: u64,
    /// Control revisitors.
    pub c: u64,
    /// Control non-revisitors.
    pub d: u64,
}

impl CampaignTable {
    pub fn new(campaign_id: impl Into<String>, a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { campaign_id: campaign_id.into(), a, b, c, d }
    }

    /// Both arms have at least one first-time visitor.
    pub fn eligible(&self) -> bool {
        self.a + self.b > 0 && self.c + self.d > 0
    }

    pub fn has_zero_cell(&self) -> bool {
        self.a == 0 || self.b == 0 || self.c == 0 || self.d == 0
    }

    /// Cells as reals, with the zero-cell correction applied when needed.
    pub fn cells(&self) -> ([f64; 4], bool) {
        let raw = [self.a, self.b, self.c, self.d].map(|v| v as f64);
        if self.has_zero_cell() {
            (raw.map(|v| v + ZERO_CELL_CORRECTION), true)
        } else {
            (raw, false)
        }
    }

    /// Log odds ratio and its Woolf variance.
    pub fn log_odds_ratio(&self) -> (f64, f64) {
        let ([a, b, c, d], _) = self.cells();
        ((a * d / (b * c)).ln(), 1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d)
    }

    /// Treatment and control columns exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.campaign_id.clone(), self.c, self.d, self.a, self.b)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RevisitTables {
    pub tables: Vec<CampaignTable>,
    /// Campaigns left out, with the reason.
    pub excluded: Vec<(String, String)>,
    /// Per-user revisit flag for every first-time visitor.
    pub outcomes: BTreeMap<String, bool>,
    pub first_visits: BTreeMap<String, FirstVisit>,
}

/// Whether each first-time visitor came back to the target within `window_days`.
///
/// A revisit is any target visit whose local day lies in `first_day + 1 ..= first_day + window`.
pub fn revisit_outcomes(
    visits: &[VisitEvent],
    first_visits: &BTreeMap<String, FirstVisit>,
    campaigns: &[Campaign],
    day_offset_s: i64,
    window_days: i64,
) -> BTreeMap<String, bool> {
    let targets: BTreeMap<&str, &str> = campaigns
        .iter()
        .map(|c| (c.campaign_id.as_str(), c.target_place_id.as_str()))
        .collect();
    let mut out: BTreeMap<String, bool> = first_visits.keys().map(|u| (u.clone(), false)).collect();
    for v in visits {
        let Some(f) = first_visits.get(&v.user_id) else { continue };
        if targets.get(f.campaign_id.as_str()) != Some(&v.place_id.as_str()) {
            continue;
        }
        let day = local_day(v.arrival, day_offset_s);
        if day > f.day && day <= f.day + window_days {
            out.insert(v.user_id.clone(), true);
        }
    }
    out
}

/// One table per campaign with at least one first-time visitor, ordered by campaign id.
pub fn build_tables(
    visits: &[VisitEvent],
    assignments: &[Assignment],
    campaigns: &[Campaign],
    day_offset_s: i64,
    window_days: i64,
) -> Result<RevisitTables> {
    if window_days < 1 {
        return Err(Error::invalid("revisit window must be at least one day"));
    }
    index_campaigns(assignments, campaigns)?;
    let first_visits = first_target_visits(visits, assignments, campaigns, day_offset_s)?;
    let outcomes = revisit_outcomes(visits, &first_visits, campaigns, day_offset_s, window_days);

    let mut counts: BTreeMap<&str, [u64; 4]> =
        campaigns.iter().map(|c| (c.campaign_id.as_str(), [0; 4])).collect();
    for (user, f) in &first_visits {
        let cell = match (f.group.is_treated(), outcomes[user]) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        counts.get_mut(f.campaign_id.as_str()).expect("indexed campaign")[cell] += 1;
    }
    let mut out = RevisitTables { outcomes, first_visits, ..Default::default() };
    for (id, [a, b, c, d]) in counts {
        if a + b + c + d == 0 {
            out.excluded.push((id.to_string(), "no first-time visitors".into()));
        } else {
            out.tables.push(CampaignTable::new(id, a, b, c, d));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMethod {
    Direct,
    #[serde(rename = "MH")]
    MantelHaenszel,
    InverseVariance,
    RandomEffects,
}

impl fmt::Display for PoolMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMethod::Direct => "Direct",
            PoolMethod::MantelHaenszel => "MH",
            PoolMethod::InverseVariance => "InverseVariance",
            PoolMethod::RandomEffects => "RandomEffects",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledEffect {
    pub method: PoolMethod,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Between-study variance; random effects only.
    pub tau2: Option<f64>,
    /// Cochran's Q over the pooled strata, where defined.
    pub q: Option<f64>,
    pub strata: usize,
    /// Tables that received the zero-cell correction.
    pub corrected: usize,
}

fn z95() -> f64 {
    normal_critical(0.05)
}

fn from_log(method: PoolMethod, log_or: f64, se: f64) -> PooledEffect {
    let z = z95();
    PooledEffect {
        method,
        odds_ratio: log_or.exp(),
        ci_low: (log_or - z * se).exp(),
        ci_high: (log_or + z * se).exp(),
        tau2: None,
        q: None,
        strata: 1,
        corrected: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectEffect {
    pub revisit_treated: f64,
    pub revisit_control: f64,
    /// Induced revisit probability: treated minus control revisit rate.
    pub risk_difference: f64,
    pub effect: PooledEffect,
}

/// Revisit-rate difference and Woolf odds ratio over the summed tables.
pub fn direct_effect(tables: &[CampaignTable]) -> Result<DirectEffect> {
    let mut sum = CampaignTable::new("all", 0, 0, 0, 0);
    for t in tables {
        sum.a += t.a;
        sum.b += t.b;
        sum.c += t.c;
        sum.d += t.d;
    }
    if !sum.eligible() {
        return Err(Error::precondition("direct effect needs first-time visitors in both arms"));
    }
    let pt = sum.a as f64 / (sum.a + sum.b) as f64;
    let pc = sum.c as f64 / (sum.c + sum.d) as f64;
    let (l, v) = sum.log_odds_ratio();
    let mut effect = from_log(PoolMethod::Direct, l, v.sqrt());
    effect.corrected = usize::from(sum.has_zero_cell());
    Ok(DirectEffect { revisit_treated: pt, revisit_control: pc, risk_difference: pt - pc, effect })
}

fn eligible(tables: &[CampaignTable]) -> Vec<&CampaignTable> {
    tables.iter().filter(|t| t.eligible()).collect()
}

/// Mantel-Haenszel pooled odds ratio with the Robins-Breslow-Greenland variance.
pub fn mh_pool(tables: &[CampaignTable]) -> Result<PooledEffect> {
    let strata = eligible(tables);
    if strata.is_empty() {
        return Err(Error::precondition("every table has an empty arm; nothing to pool"));
    }
    let (mut r, mut s) = (0.0, 0.0);
    let (mut pr, mut ps_qr, mut qs) = (0.0, 0.0, 0.0);
    let mut corrected = 0;
    for t in &strata {
        let ([a, b, c, d], fixed) = t.cells();
        corrected += usize::from(fixed);
        let n = a + b + c + d;
        let (rk, sk) = (a * d / n, b * c / n);
        let (pk, qk) = ((a + d) / n, (b + c) / n);
        r += rk;
        s += sk;
        pr += pk * rk;
        ps_qr += pk * sk + qk * rk;
        qs += qk * sk;
    }
    let var = pr / (2.0 * r * r) + ps_qr / (2.0 * r * s) + qs / (2.0 * s * s);
    let mut e = from_log(PoolMethod::MantelHaenszel, (r / s).ln(), var.sqrt());
    e.strata = strata.len();
    e.corrected = corrected;
    Ok(e)
}

struct InverseVariance {
    log_or: f64,
    se: f64,
    q: f64,
    tau2: f64,
    corrected: usize,
    strata: usize,
}

fn inverse_variance(tables: &[CampaignTable]) -> Result<InverseVariance> {
    let strata = eligible(tables);
    if strata.is_empty() {
        return Err(Error::precondition("every table has an empty arm; nothing to pool"));
    }
    let ys: Vec<(f64, f64)> = strata.iter().map(|t| t.log_odds_ratio()).collect();
    let corrected = strata.iter().filter(|t| t.has_zero_cell()).count();
    let sw: f64 = ys.iter().map(|(_, v)| 1.0 / v).sum();
    let sw2: f64 = ys.iter().map(|(_, v)| 1.0 / (v * v)).sum();
    let fe: f64 = ys.iter().map(|(y, v)| y / v).sum::<f64>() / sw;
    let q: f64 = ys.iter().map(|(y, v)| (y - fe).powi(2) / v).sum();
    let k = ys.len() as f64;
    let denom = sw - sw2 / sw;
    let tau2 = if denom > 0.0 { ((q - (k - 1.0)) / denom).max(0.0) } else { 0.0 };
    Ok(InverseVariance { log_or: fe, se: (1.0 / sw).sqrt(), q, tau2, corrected, strata: ys.len() })
}

/// Fixed-effect inverse-variance pooling of per-table log odds ratios.
pub fn inverse_variance_pool(tables: &[CampaignTable]) -> Result<PooledEffect> {
    let iv = inverse_variance(tables)?;
    let mut e = from_log(PoolMethod::InverseVariance, iv.log_or, iv.se);
    e.q = Some(iv.q);
    e.strata = iv.strata;
    e.corrected = iv.corrected;
    Ok(e)
}

/// DerSimonian-Laird random-effects pooling of per-table log odds ratios.
pub fn random_effects_pool(tables: &[CampaignTable]) -> Result<PooledEffect> {
    let strata = eligible(tables);
    if strata.len() < 2 {
        return Err(Error::precondition(format!(
            "random-effects pooling needs at least 2 eligible tables, got {}; use mh_pool",
            strata.len()
        )));
    }
    let iv = inverse_variance(tables)?;
    let (mut sw, mut swy) = (0.0, 0.0);
    for t in &strata {
        let (y, v) = t.log_odds_ratio();
        let w = 1.0 / (v + iv.tau2);
        sw += w;
        swy += w * y;
    }
    let mut e = from_log(PoolMethod::RandomEffects, swy / sw, (1.0 / sw).sqrt());
    e.tau2 = Some(iv.tau2);
    e.q = Some(iv.q);
    e.strata = iv.strata;
    e.corrected = iv.corrected;
    Ok(e)
}

/// Per-table odds ratio with its Woolf interval, for forest plots.
pub fn table_effect(t: &CampaignTable) -> Option<PooledEffect> {
    if !t.eligible() {
        return None;
    }
    let (l, v) = t.log_odds_ratio();
    let mut e = from_log(PoolMethod::Direct, l, v.sqrt());
    e.corrected = usize::from(t.has_zero_cell());
    Some(e)
}

//! Post-visit travel-distance differences from fixed-effects regressions and an event study.

mod ols;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use ols::{demean, ols_hc1, Design, OlsResult};

use crate::error::{Error, Result};
use crate::stats::{t_critical, t_two_sided_p};
use crate::trajectory::Assignment;

/// Days either side of the first target-shop visit.
pub const WINDOW_DAYS: i32 = 3;

/// Omitted day offset for Day fixed effects and the event study.
pub const REFERENCE_DAY: i32 = -WINDOW_DAYS;

/// Name of the treatment-after interaction column.
pub const EFFECT_COLUMN: &str = "aft_x_t";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub user_id: String,
    pub campaign_id: String,
    /// Day offset from the first target-shop visit.
    pub s: i32,
    /// Travel distance in km; 0 when `missing`.
    pub d: f64,
    pub treated: bool,
    /// Local calendar day index (days since 1970-01-01).
    pub day: i64,
    /// Day of week, Monday = 0.
    pub dow: u8,
    pub missing: bool,
}

impl PanelRow {
    pub fn aft(&self) -> bool {
        self.s > 0
    }
}

/// Day of week for a day index, Monday = 0.
pub fn day_of_week(day: i64) -> u8 {
    // 1970-01-01 was a Thursday.
    (day + 3).rem_euclid(7) as u8
}

#[derive(Clone, Debug, Default)]
pub struct PanelBuild {
    pub rows: Vec<PanelRow>,
    /// Assigned users without a first-visit day.
    pub excluded_no_visit: usize,
    /// Users with a first-visit day but no assignment.
    pub excluded_unassigned: usize,
}

/// Seven rows per user around their first target-shop visit day.
///
/// Days absent from `distances` get `d = 0` and `missing = true`.
pub fn build_panel(
    distances: &BTreeMap<(String, i64), f64>,
    first_visit_days: &BTreeMap<String, i64>,
    assignments: &[Assignment],
) -> PanelBuild {
    let by_user: HashMap<&str, &Assignment> =
        assignments.iter().map(|a| (a.user_id.as_str(), a)).collect();
    let mut out = PanelBuild::default();
    for (user, &first) in first_visit_days {
        let Some(a) = by_user.get(user.as_str()) else {
            out.excluded_unassigned += 1;
            continue;
        };
        for s in -WINDOW_DAYS..=WINDOW_DAYS {
            let day = first + i64::from(s);
            let d = distances.get(&(user.clone(), day)).copied();
            out.rows.push(PanelRow {
                user_id: user.clone(),
                campaign_id: a.campaign_id.clone(),
                s,
                d: d.unwrap_or(0.0),
                treated: a.group.is_treated(),
                day,
                dow: day_of_week(day),
                missing: d.is_none(),
            });
        }
    }
    let with_visit: BTreeSet<&str> = first_visit_days.keys().map(String::as_str).collect();
    let mut seen = BTreeSet::new();
    for a in assignments {
        if seen.insert(a.user_id.as_str()) && !with_visit.contains(a.user_id.as_str()) {
            out.excluded_no_visit += 1;
        }
    }
    out
}

/// Fixed effects included in a regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeConfig {
    pub ad: bool,
    pub customer: bool,
    pub dow: bool,
    pub day: bool,
}

impl FeConfig {
    pub const MODEL_1: FeConfig = FeConfig { ad: true, customer: false, dow: false, day: false };
    pub const MODEL_2: FeConfig = FeConfig { ad: true, customer: false, dow: true, day: false };
    pub const MODEL_3: FeConfig = FeConfig { ad: true, customer: true, dow: false, day: false };
    pub const MODEL_4: FeConfig = FeConfig { ad: true, customer: true, dow: true, day: true };

    /// The four standard configurations, in table order.
    pub const STANDARD: [FeConfig; 4] = [Self::MODEL_1, Self::MODEL_2, Self::MODEL_3, Self::MODEL_4];

    pub fn labels(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.ad {
            v.push("Ad");
        }
        if self.customer {
            v.push("Customer");
        }
        if self.dow {
            v.push("DoW");
        }
        if self.day {
            v.push("Day");
        }
        v
    }

    /// Parses a `+`- or `,`-separated list such as `Ad+Customer`. An empty string means none.
    pub fn parse(s: &str) -> Result<Self> {
        let mut c = FeConfig::default();
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "ad" => c.ad = true,
                "customer" => c.customer = true,
                "dow" => c.dow = true,
                "day" => c.day = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown fixed effect {other:?}"))),
            }
        }
        Ok(c)
    }
}

impl fmt::Display for FeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = self.labels();
        if l.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&l.join("+"))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelOptions {
    /// Keep the visit-day rows (with Aft = 0) in the regression.
    pub include_visit_day: bool,
    /// Estimate Customer effects with explicit dummies instead of demeaning.
    pub explicit_customer_dummies: bool,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self { include_visit_day: true, explicit_customer_dummies: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PanelFit {
    pub fe_config: FeConfig,
    /// Treatment-after difference in km.
    pub beta: f64,
    pub std_err: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Control-group mean distance after the visit day.
    pub baseline: f64,
    pub baseline_std_err: f64,
    pub baseline_p_value: f64,
    pub n_obs: usize,
    pub n_users: usize,
    pub df_resid: f64,
    /// Dummy columns dropped as redundant.
    pub dropped: Vec<String>,
}

impl PanelFit {
    pub fn relative_difference(&self) -> f64 {
        self.beta / self.baseline
    }
}

struct Prepared<'a> {
    rows: Vec<&'a PanelRow>,
    user_index: Vec<usize>,
    n_users: usize,
}

fn prepare<'a>(panel: &'a [PanelRow], opts: &PanelOptions, need_repeat: bool) -> Result<Prepared<'a>> {
    if panel.is_empty() {
        return Err(Error::precondition("panel is empty"));
    }
    let rows: Vec<&PanelRow> =
        panel.iter().filter(|r| opts.include_visit_day || r.s != 0).collect();
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        let next = ids.len();
        ids.entry(r.user_id.as_str()).or_insert(next);
    }
    let user_index: Vec<usize> = rows.iter().map(|r| ids[r.user_id.as_str()]).collect();
    if need_repeat {
        let mut counts = vec![0usize; ids.len()];
        user_index.iter().for_each(|&u| counts[u] += 1);
        if let Some((user, _)) = ids.iter().find(|(_, &i)| counts[i] < 2) {
            return Err(Error::precondition(format!(
                "customer fixed effects need at least 2 rows per user; {user} has fewer"
            )));
        }
    }
    Ok(Prepared { n_users: ids.len(), rows, user_index })
}

fn indicator(rows: &[&PanelRow], f: impl Fn(&PanelRow) -> bool) -> Vec<f64> {
    rows.iter().map(|r| if f(r) { 1.0 } else { 0.0 }).collect()
}

fn push_fe_dummies(design: &mut Design, rows: &[&PanelRow], cfg: &FeConfig, day: bool) {
    if cfg.ad {
        let campaigns: BTreeSet<&str> = rows.iter().map(|r| r.campaign_id.as_str()).collect();
        for c in campaigns.into_iter().skip(1) {
            design.push(format!("ad[{c}]"), indicator(rows, |r| r.campaign_id == c));
        }
    }
    if cfg.dow {
        for d in 1..7u8 {
            design.push(format!("dow[{d}]"), indicator(rows, |r| r.dow == d));
        }
    }
    if day {
        for s in (-WINDOW_DAYS..=WINDOW_DAYS).filter(|&s| s != REFERENCE_DAY) {
            design.push(format!("day[{s}]"), indicator(rows, |r| r.s == s));
        }
    }
}

fn baseline(rows: &[&PanelRow]) -> Result<(f64, f64, f64)> {
    let post: Vec<f64> = rows
        .iter()
        .filter(|r| !r.treated && r.aft() && !r.missing)
        .map(|r| r.d)
        .collect();
    if post.is_empty() {
        return Err(Error::precondition("no observed control-group rows after the visit day"));
    }
    let n = post.len() as f64;
    let m = crate::stats::mean(&post);
    let se = if post.len() > 1 { crate::stats::std_dev(&post) / n.sqrt() } else { f64::NAN };
    let p = if se > 0.0 { t_two_sided_p(m / se, n - 1.0) } else { f64::NAN };
    Ok((m, se, p))
}

fn run(
    prep: &Prepared<'_>,
    mut design: Design,
    absorb_customer: bool,
    explicit_customer: bool,
) -> Result<OlsResult> {
    let y: Vec<f64> = prep.rows.iter().map(|r| r.d).collect();
    if absorb_customer && explicit_customer {
        // Intercept stays; the first user is the omitted category.
        for u in 1..prep.n_users {
            design.push(
                format!("customer[{u}]"),
                prep.user_index.iter().map(|&i| if i == u { 1.0 } else { 0.0 }).collect(),
            );
        }
        ols_hc1(&y, &design, None)
    } else if absorb_customer {
        ols_hc1(&y, &design, Some((&prep.user_index, prep.n_users)))
    } else {
        ols_hc1(&y, &design, None)
    }
}

/// OLS of distance on the treatment-after interaction plus the requested fixed effects.
///
/// Customer effects are absorbed by demeaning within user unless
/// `explicit_customer_dummies` is set. Dummies that turn out redundant are dropped and listed in
/// [`PanelFit::dropped`]; losing the interaction itself is an error.
pub fn fit_fixed_effects(panel: &[PanelRow], cfg: FeConfig, opts: &PanelOptions) -> Result<PanelFit> {
    let prep = prepare(panel, opts, cfg.customer)?;
    let rows = &prep.rows;
    let mut design = Design::default();
    if !cfg.customer || opts.explicit_customer_dummies {
        design.push("const", vec![1.0; rows.len()]);
    }
    design.push(EFFECT_COLUMN, indicator(rows, |r| r.treated && r.aft()));
    if rows.iter().any(|r| r.missing) {
        design.push("missing", indicator(rows, |r| r.missing));
    }
    push_fe_dummies(&mut design, rows, &cfg, cfg.day);

    let res = run(&prep, design, cfg.customer, opts.explicit_customer_dummies)?;
    let (beta, se) = res.coef(EFFECT_COLUMN).ok_or_else(|| {
        Error::RankDeficient(format!("{EFFECT_COLUMN} is collinear with the {cfg} fixed effects"))
    })?;
    if !(se > 0.0) {
        return Err(Error::Numerical(format!("non-positive standard error for {EFFECT_COLUMN}")));
    }
    let tc = t_critical(0.05, res.df_resid);
    let (b, bse, bp) = baseline(rows)?;
    Ok(PanelFit {
        fe_config: cfg,
        beta,
        std_err: se,
        p_value: t_two_sided_p(beta / se, res.df_resid),
        ci_low: beta - tc * se,
        ci_high: beta + tc * se,
        baseline: b,
        baseline_std_err: bse,
        baseline_p_value: bp,
        n_obs: res.n_obs,
        n_users: prep.n_users,
        df_resid: res.df_resid,
        dropped: res.dropped.into_iter().filter(|n| !n.starts_with("customer[")).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventCoefficient {
    pub s: i32,
    pub coef: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

/// Treatment-by-day coefficients relative to `s = -3`, with Ad and Day fixed effects.
///
/// The reference day is reported with coefficient, error and interval exactly 0.
pub fn event_study(panel: &[PanelRow]) -> Result<Vec<EventCoefficient>> {
    let opts = PanelOptions::default();
    let prep = prepare(panel, &opts, false)?;
    let rows = &prep.rows;
    let mut design = Design::default();
    design.push("const", vec![1.0; rows.len()]);
    design.push("treated", indicator(rows, |r| r.treated));
    let offsets: Vec<i32> = (-WINDOW_DAYS..=WINDOW_DAYS).filter(|&s| s != REFERENCE_DAY).collect();
    for &s in &offsets {
        design.push(format!("t_x_day[{s}]"), indicator(rows, |r| r.treated && r.s == s));
    }
    if rows.iter().any(|r| r.missing) {
        design.push("missing", indicator(rows, |r| r.missing));
    }
    let cfg = FeConfig { ad: true, day: true, ..FeConfig::default() };
    push_fe_dummies(&mut design, rows, &cfg, true);
    let res = run(&prep, design, false, false)?;
    let tc = t_critical(0.05, res.df_resid);

    let mut out = vec![EventCoefficient {
        s: REFERENCE_DAY,
        coef: 0.0,
        std_err: 0.0,
        ci_low: 0.0,
        ci_high: 0.0,
        p_value: 1.0,
    }];
    for s in offsets {
        let name = format!("t_x_day[{s}]");
        let (coef, se) = res.coef(&name).ok_or_else(|| {
            Error::RankDeficient(format!("{name} is not identified; both groups need rows on day {s}"))
        })?;
        out.push(EventCoefficient {
            s,
            coef,
            std_err: se,
            ci_low: coef - tc * se,
            ci_high: coef + tc * se,
            p_value: if se > 0.0 { t_two_sided_p(coef / se, res.df_resid) } else { f64::NAN },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Group;

    fn assignment(user: &str, campaign: &str, group: Group) -> Assignment {
        Assignment { user_id: user.into(), campaign_id: campaign.into(), group }
    }

    #[test]
    fn window_rows_and_after_flag() {
        let mut dist = BTreeMap::new();
        for day in 97..=103 {
            dist.insert(("u".to_string(), day), 10.0);
        }
        dist.remove(&("u".to_string(), 99));
        let first = BTreeMap::from([("u".to_string(), 100)]);
        let b = build_panel(&dist, &first, &[assignment("u", "c1", Group::Treatment)]);
        assert_eq!(b.rows.len(), 7);
        let s: Vec<i32> = b.rows.iter().map(|r| r.s).collect();
        assert_eq!(s, vec![-3, -2, -1, 0, 1, 2, 3]);
        assert!(!b.rows[3].aft());
        assert!(b.rows[4].aft());
        assert!(b.rows[2].missing);
        assert_eq!(b.rows[2].d, 0.0);
    }

    #[test]
    fn users_without_visit_are_counted() {
        let first = BTreeMap::from([("a".to_string(), 5), ("z".to_string(), 5)]);
        let b = build_panel(
            &BTreeMap::new(),
            &first,
            &[assignment("a", "c", Group::Control), assignment("b", "c", Group::Treatment)],
        );
        assert_eq!(b.excluded_no_visit, 1);
        assert_eq!(b.excluded_unassigned, 1);
        assert_eq!(b.rows.len(), 7);
    }

    #[test]
    fn day_of_week_epoch() {
        assert_eq!(day_of_week(0), 3);
        assert_eq!(day_of_week(4), 0);
        assert_eq!(day_of_week(-1), 2);
    }

    #[test]
    fn fe_config_round_trip() {
        for c in FeConfig::STANDARD {
            assert_eq!(FeConfig::parse(&c.to_string()).unwrap(), c);
        }
        assert!(FeConfig::parse("Ad+Week").is_err());
    }
}

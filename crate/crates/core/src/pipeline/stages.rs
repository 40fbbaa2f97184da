use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{open, read_demographics, svg, Demographics, LoadedConfig, Outputs};
use crate::error::{Error, Result};
use crate::geo::offset_distance_m;
use crate::panel::{build_panel, event_study, fit_fixed_effects, PanelOptions};
use crate::revisit::{
    build_tables, direct_effect, inverse_variance_pool, mh_pool, random_effects_pool, table_effect, PooledEffect,
    RevisitTables,
};
use crate::spatial::{fit_gwr_logistic, predict_dominance, select_bandwidth, GwrDesign, GwrFit, PredictionCell};
use crate::trajectory::{
    align_points, build_grid, daily_travel_distance, detect_visits, dominance_labels, first_target_visits,
    ingest_records, local_day, normalize_grid, read_assignments, read_campaigns, read_places, sort_and_dedup,
    Assignment, Campaign, CategoryRegistry, DominanceLabel, FirstVisit, Group, Ingested, LocationRecord, Place,
    VisitEvent,
};
use crate::uplift::{
    auuc_permutation_test, build_uplift_dataset, fit_base_learner, permutation_importance, predict_tau,
    select_features, uplift_curve, FeatureInputs,
};

/// Independent seeds for the randomised steps, all derived from the master seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Default)]
struct Data {
    records: Vec<LocationRecord>,
    places: Vec<Place>,
    assignments: Vec<Assignment>,
    campaigns: Vec<Campaign>,
    demographics: Option<Demographics>,
    visits: Vec<VisitEvent>,
    first: BTreeMap<String, FirstVisit>,
    labels: Vec<DominanceLabel>,
}

pub(crate) struct State<'a> {
    loaded: &'a LoadedConfig,
    registry: CategoryRegistry,
    data: Data,
    tables: Option<RevisitTables>,
    pub warnings: Vec<String>,
}

impl<'a> State<'a> {
    pub fn new(loaded: &'a LoadedConfig) -> Self {
        State { loaded, registry: CategoryRegistry::default(), data: Data::default(), tables: None, warnings: Vec::new() }
    }

    pub fn run_stage(&mut self, name: &str, out: &mut Outputs) -> Result<()> {
        match name {
            "trajectory" => self.trajectory(out),
            "gwr" => self.gwr(out),
            "panel" => self.panel(out),
            "revisit" => self.revisit(out),
            "uplift" => self.uplift(out),
            other => Err(Error::invalid(format!("unknown stage {other}"))),
        }
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    fn ingest<T>(&mut self, file: &Path, parse: impl FnOnce(std::io::BufReader<std::fs::File>) -> Result<Ingested<T>>) -> Result<Vec<T>> {
        let path = self.loaded.input_path(file);
        let got = parse(open(&path)?).map_err(|e| match e {
            Error::File { .. } => e,
            other => Error::invalid(format!("{}: {other}", path.display())),
        })?;
        if !got.rejected.is_empty() {
            let first = &got.rejected[0];
            self.warn(format!(
                "{}: {} malformed rows skipped (first at line {}: {})",
                path.display(),
                got.rejected.len(),
                first.line,
                first.message
            ));
        }
        Ok(got.items)
    }

    fn trajectory(&mut self, out: &mut Outputs) -> Result<()> {
        let loaded = self.loaded;
        let cfg = &loaded.config;
        let t = cfg.trajectory;
        let inputs = cfg.inputs.clone();
        let reg = self.registry.clone();
        let assignments = self.ingest(&inputs.assignments, read_assignments)?;
        let campaigns = self.ingest(&inputs.campaigns, read_campaigns)?;
        let places = self.ingest(&inputs.places, |r| read_places(r, &reg))?;
        let mut records = self.ingest(&inputs.pings, ingest_records)?;
        sort_and_dedup(&mut records);
        let demo_path = self.loaded.input_path(&inputs.demographics);
        let demographics = if cfg.stages.uplift && cfg.uplift.use_demographics {
            if demo_path.is_file() {
                Some(read_demographics(open(&demo_path)?)?)
            } else {
                self.warn(format!("{} not found; demographic features dropped", demo_path.display()));
                None
            }
        } else {
            None
        };

        let visits = detect_visits(&records, &places, t.visit_radius_m, t.min_dwell_s)?;
        let first = first_target_visits(&visits, &assignments, &campaigns, t.day_offset_s)?;
        log::info!("{} pings, {} stays, {} first-time visitors", records.len(), visits.len(), first.len());

        let groups: HashMap<String, Group> = assignments.iter().map(|a| (a.user_id.clone(), a.group)).collect();
        let place_by_id: HashMap<&str, &Place> = places.iter().map(|p| (p.place_id.as_str(), p)).collect();
        let mut by_campaign: BTreeMap<&str, Vec<VisitEvent>> = BTreeMap::new();
        for v in &visits {
            let Some(f) = first.get(&v.user_id) else { continue };
            let Some(camp) = campaigns.iter().find(|c| c.campaign_id == f.campaign_id) else { continue };
            let day = local_day(v.arrival, t.day_offset_s);
            if v.arrival > f.arrival && day <= f.day + t.post_visit_days && v.place_id != camp.target_place_id {
                by_campaign.entry(camp.campaign_id.as_str()).or_default().push(v.clone());
            }
        }
        let mut points = Vec::new();
        for (cid, vs) in &by_campaign {
            let camp = campaigns.iter().find(|c| c.campaign_id == *cid).expect("campaign indexed");
            let target = place_by_id
                .get(camp.target_place_id.as_str())
                .ok_or_else(|| Error::invalid(format!("campaign {cid} targets unknown place {}", camp.target_place_id)))?;
            points.extend(align_points(vs, target, &groups).points);
        }
        let grid = build_grid(&points, t.cell_size_deg, t.grid_radius_m)?;
        let norm = normalize_grid(&grid, &grid.user_point_counts(), &groups)?;
        let labels = dominance_labels(&norm)?;
        log::info!("{} post-visit stays in range, {} labelled cells", grid.members.len(), labels.len());

        out.csv("dominance_labels.csv", &labels)?;
        let cells: Vec<(f64, f64, usize)> =
            labels.iter().map(|l| (l.center_u, l.center_v, usize::from(l.y == 1))).collect();
        out.text(
            "dominance_map.svg",
            &svg::cell_map(
                "Dominant group per cell after the first visit",
                &cells,
                t.cell_size_deg,
                &[("control dominates", svg::BLUE), ("treatment dominates", svg::RED)],
            ),
        )?;
        self.data = Data { records, places, assignments, campaigns, demographics, visits, first, labels };
        Ok(())
    }

    fn gwr(&mut self, out: &mut Outputs) -> Result<()> {
        let loaded = self.loaded;
        let cfg = &loaded.config;
        let g = cfg.gwr;
        let mut labels = self.data.labels.clone();
        if g.max_locations > 0 && labels.len() > g.max_locations {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
            let mut keep = rand::seq::index::sample(&mut rng, labels.len(), g.max_locations).into_vec();
            keep.sort_unstable();
            let msg = format!("gwr: {} labelled cells subsampled to {}", labels.len(), g.max_locations);
            labels = keep.into_iter().map(|i| labels[i].clone()).collect();
            self.warn(msg);
        }
        let mut models = vec![("model_1", false)];
        if g.with_shares {
            models.push(("model_2", true));
        }
        let mut table = Vec::new();
        let mut preds = Vec::new();
        for (name, shares) in models {
            let design = GwrDesign::from_labels(&labels, shares)?;
            let sel = select_bandwidth(&design, g.kernel, g.bandwidth, g.per_feature)?;
            let bws = sel.bandwidths();
            let fit = fit_gwr_logistic(&design, g.kernel, &bws)?;
            for (j, s) in fit.summary.iter().enumerate() {
                table.push(GwrRow {
                    model: name,
                    feature: s.feature.clone(),
                    mean: s.mean,
                    std_err: s.std_err,
                    p_value: s.p_value,
                    dispersion: s.dispersion,
                    bandwidth: bws.for_feature(j).value(),
                    aicc: fit.aicc,
                    n_locations: fit.n(),
                    separated: fit.separated.len(),
                });
            }
            let cells = if shares { observed_cells(&labels) } else { lattice(cfg.trajectory.cell_size_deg, cfg.trajectory.grid_radius_m) };
            for p in predict_dominance(&fit, &cells)? {
                preds.push(PredictionRow {
                    model: name,
                    u: p.u,
                    v: p.v,
                    probability: p.probability,
                    label: p.label,
                    extrapolated: p.extrapolated,
                });
            }
            log_fit(name, &fit);
            if !fit.separated.is_empty() {
                self.warn(format!(
                    "gwr {name}: perfect separation at {} of {} locations; local coefficients clipped",
                    fit.separated.len(),
                    fit.n()
                ));
            }
        }
        out.csv("gwr_table.csv", &table)?;
        out.csv("gwr_prediction.csv", &preds)?;
        let cells: Vec<(f64, f64, usize)> = preds
            .iter()
            .filter(|p| p.model == "model_1")
            .map(|p| (p.u, p.v, usize::from(p.label == 1)))
            .collect();
        out.text(
            "gwr_prediction.svg",
            &svg::cell_map(
                "Predicted dominant group (distance model)",
                &cells,
                cfg.trajectory.cell_size_deg,
                &[("control predicted", svg::BLUE), ("treatment predicted", svg::RED)],
            ),
        )
    }

    fn panel(&mut self, out: &mut Outputs) -> Result<()> {
        let loaded = self.loaded;
        let cfg = &loaded.config;
        let p = &cfg.panel;
        let dist = daily_travel_distance(&self.data.records, cfg.trajectory.day_offset_s);
        let days: BTreeMap<String, i64> = self.data.first.iter().map(|(u, f)| (u.clone(), f.day)).collect();
        let panel = build_panel(&dist, &days, &self.data.assignments);
        if panel.excluded_unassigned > 0 {
            self.warn(format!("panel: {} visitors without assignment excluded", panel.excluded_unassigned));
        }
        let opts = PanelOptions { include_visit_day: p.include_visit_day, explicit_customer_dummies: p.explicit_customer_dummies };
        let mut rows = Vec::new();
        for fe in p.fe_configs()? {
            let fit = fit_fixed_effects(&panel.rows, fe, &opts)?;
            log::info!("panel {fe}: beta {:.3} [{:.3}, {:.3}]", fit.beta, fit.ci_low, fit.ci_high);
            rows.push(PanelRowOut {
                model: fe.to_string(),
                beta: fit.beta,
                std_err: fit.std_err,
                p_value: fit.p_value,
                ci_low: fit.ci_low,
                ci_high: fit.ci_high,
                baseline: fit.baseline,
                baseline_std_err: fit.baseline_std_err,
                relative_difference: fit.relative_difference(),
                n_obs: fit.n_obs,
                n_users: fit.n_users,
                df_resid: fit.df_resid,
                dropped: fit.dropped.join(";"),
            });
        }
        out.csv("panel_table.csv", &rows)?;
        if p.event_study {
            let es = event_study(&panel.rows)?;
            out.csv("event_study.csv", &es)?;
            let pts: Vec<(f64, f64, f64, f64)> =
                es.iter().map(|e| (f64::from(e.s), e.coef, e.ci_low, e.ci_high)).collect();
            out.text(
                "event_study.svg",
                &svg::interval_plot(
                    "Treatment-control distance gap by day from first visit",
                    "days from first visit",
                    "difference in daily distance (km)",
                    &pts,
                ),
            )?;
        }
        Ok(())
    }

    fn revisit(&mut self, out: &mut Outputs) -> Result<()> {
        let loaded = self.loaded;
        let cfg = &loaded.config;
        let d = &self.data;
        let tables = build_tables(&d.visits, &d.assignments, &d.campaigns, cfg.trajectory.day_offset_s, cfg.revisit.window_days)?;
        if !tables.excluded.is_empty() {
            self.warn(format!("revisit: {} campaigns excluded", tables.excluded.len()));
        }
        let mut rows = Vec::new();
        for t in &tables.tables {
            let e = table_effect(t);
            rows.push(OddsRow::new(&t.campaign_id, "table", e.as_ref(), Some((t.a, t.b, t.c, t.d))));
        }
        let direct = direct_effect(&tables.tables)?;
        let mut pooled = vec![("Direct", Ok(direct.effect.clone())), ("MH", mh_pool(&tables.tables))];
        pooled.push(("InverseVariance", inverse_variance_pool(&tables.tables)));
        pooled.push(("RandomEffects", random_effects_pool(&tables.tables)));
        for (method, res) in pooled {
            match res {
                Ok(e) => rows.push(OddsRow::new("pooled", method, Some(&e), None)),
                Err(e) => self.warn(format!("revisit: {method} pooling skipped: {e}")),
            }
        }
        out.csv("revisit_odds.csv", &rows)?;
        let forest: Vec<(String, f64, f64, f64, bool)> = rows
            .iter()
            .filter(|r| r.odds_ratio.is_finite() && r.ci_low > 0.0 && r.ci_high.is_finite())
            .map(|r| {
                let pooled = r.label == "pooled";
                (if pooled { r.method.to_string() } else { r.label.clone() }, r.odds_ratio, r.ci_low, r.ci_high, pooled)
            })
            .collect();
        out.text("revisit_odds.svg", &svg::forest_plot("Revisit odds ratio, treatment vs control", &forest))?;
        log::info!(
            "revisit: direct OR {:.3}, treated {:.3} vs control {:.3}",
            direct.effect.odds_ratio,
            direct.revisit_treated,
            direct.revisit_control
        );
        self.tables = Some(tables);
        Ok(())
    }

    fn uplift(&mut self, out: &mut Outputs) -> Result<()> {
        let loaded = self.loaded;
        let cfg = &loaded.config;
        let u = &cfg.uplift;
        let d = &self.data;
        let tables = self.tables.as_ref().ok_or_else(|| Error::precondition("uplift needs the revisit stage"))?;
        let demo = d.demographics.as_ref().map(|x| (x.names.as_slice(), &x.values));
        let data = build_uplift_dataset(&FeatureInputs {
            records: &d.records,
            visits: &d.visits,
            places: &d.places,
            campaigns: &d.campaigns,
            first_visits: &tables.first_visits,
            outcomes: &tables.outcomes,
            registry: &self.registry,
            demographics: demo,
            day_offset_s: cfg.trajectory.day_offset_s,
            home_cell_deg: cfg.trajectory.home_cell_deg,
        })?;
        let parts = data.split(&u.split, sub_seed(cfg.seed, 2));
        let (sel_part, train, eval) = (&parts[0], &parts[1], &parts[2]);
        let (selected, trials) = if u.feature_search && data.p() >= 2 {
            let s = select_features(sel_part, u.search_budget, &u.gbdt, sub_seed(cfg.seed, 3))?;
            (s.selected.clone(), s.trials)
        } else {
            ((0..data.p()).collect(), Vec::new())
        };
        let model = fit_base_learner(train, Some(&selected), &u.gbdt)?;
        let tau = predict_tau(&model, eval)?;
        let curve = uplift_curve(&tau, &eval.treatment, &eval.revisit, sub_seed(cfg.seed, 4))?;
        let test = auuc_permutation_test(&tau, &eval.treatment, &eval.revisit, u.permutations, sub_seed(cfg.seed, 4))?;
        let importance = permutation_importance(&model, eval, u.importance_repeats, sub_seed(cfg.seed, 5))?;

        out.text("model.json", &(model.to_json()? + "\n"))?;
        let curve_rows: Vec<CurveRow> = (0..curve.k.len())
            .map(|i| CurveRow { k: curve.k[i], f1: curve.f1[i], f0: curve.f0[i], interpolated: curve.interpolated.contains(&i) })
            .collect();
        out.csv("uplift_curve.csv", &curve_rows)?;
        let pts = |f: &[f64]| curve.k.iter().copied().zip(f.iter().copied()).collect::<Vec<_>>();
        out.text(
            "uplift_curve.svg",
            &svg::line_chart(
                "Cumulative success by share of customers targeted",
                "share targeted (k)",
                "cumulative revisit success",
                &[("uplift model", svg::RED, pts(&curve.f1)), ("random targeting", svg::GREY, pts(&curve.f0))],
            ),
        )?;
        let mut ranked = importance.clone();
        ranked.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.index.cmp(&b.index)));
        out.csv("feature_importance.csv", &ranked)?;
        let bars: Vec<(String, f64, f64)> = ranked
            .iter()
            .take(10)
            .map(|f| (format!("{} ({})", f.feature, if f.sign >= 0.0 { "+" } else { "-" }), f.importance, f.std_err))
            .collect();
        out.text(
            "feature_importance.svg",
            &svg::bar_chart("Top features by permutation importance", "drop in AUUC", &bars),
        )?;
        if !trials.is_empty() {
            let rows: Vec<TrialRow> = trials
                .iter()
                .map(|t| TrialRow {
                    trial: t.trial,
                    auuc: t.auuc,
                    repeated: t.repeated,
                    features: t.mask.iter().map(|&j| data.feature_names[j].as_str()).collect::<Vec<_>>().join(";"),
                })
                .collect();
            out.csv("feature_search.csv", &rows)?;
        }
        let summary = [
            ("rows", data.n().to_string()),
            ("features", data.p().to_string()),
            ("selected_features", model.selected_names().join(";")),
            ("eval_rows", eval.n().to_string()),
            ("treatment_share", data.treatment_share().to_string()),
            ("auuc", curve.auuc.to_string()),
            ("auuc_null_mean", test.null_mean.to_string()),
            ("auuc_null_sd", test.null_sd.to_string()),
            ("auuc_p_value", test.p_value.to_string()),
            ("peak_k", curve.peak_k().to_string()),
        ];
        out.csv("uplift_summary.csv", summary.iter().map(|(m, v)| SummaryRow { metric: m, value: v }))?;
        log::info!("uplift: AUUC {:.4} (p {:.3}), peak at k = {:.2}", curve.auuc, test.p_value, curve.peak_k());
        Ok(())
    }
}

fn log_fit(name: &str, fit: &GwrFit) {
    for s in &fit.summary {
        log::info!("gwr {name} {}: mean {:.4} (p {:.3})", s.feature, s.mean, s.p_value);
    }
}

/// Cell centres covering the grid disc, for predictions from distance alone.
fn lattice(cell: f64, radius_m: f64) -> Vec<PredictionCell> {
    let r = (radius_m / 111_000.0 / cell).ceil() as i64 + 1;
    let mut out = Vec::new();
    for i in -r..r {
        for j in -r..r {
            let (u, v) = ((i as f64 + 0.5) * cell, (j as f64 + 0.5) * cell);
            let dm = offset_distance_m(u, v);
            if dm <= radius_m {
                out.push(PredictionCell { u, v, x: vec![1.0, dm / 1000.0] });
            }
        }
    }
    out
}

fn observed_cells(labels: &[DominanceLabel]) -> Vec<PredictionCell> {
    labels
        .iter()
        .map(|l| PredictionCell {
            u: l.center_u,
            v: l.center_v,
            x: vec![1.0, l.distance_m / 1000.0, l.food_share, l.shopping_share],
        })
        .collect()
}

#[derive(Serialize)]
struct GwrRow {
    model: &'static str,
    feature: String,
    mean: f64,
    std_err: f64,
    p_value: f64,
    dispersion: f64,
    bandwidth: f64,
    aicc: f64,
    n_locations: usize,
    separated: usize,
}

#[derive(Serialize)]
struct PredictionRow {
    model: &'static str,
    u: f64,
    v: f64,
    probability: f64,
    label: u8,
    extrapolated: bool,
}

#[derive(Serialize)]
struct PanelRowOut {
    model: String,
    beta: f64,
    std_err: f64,
    p_value: f64,
    ci_low: f64,
    ci_high: f64,
    baseline: f64,
    baseline_std_err: f64,
    relative_difference: f64,
    n_obs: usize,
    n_users: usize,
    df_resid: f64,
    dropped: String,
}

#[derive(Serialize)]
struct OddsRow {
    label: String,
    method: &'static str,
    odds_ratio: f64,
    ci_low: f64,
    ci_high: f64,
    tau2: Option<f64>,
    q: Option<f64>,
    strata: usize,
    corrected: usize,
    a: Option<u64>,
    b: Option<u64>,
    c: Option<u64>,
    d: Option<u64>,
}

impl OddsRow {
    fn new(label: &str, method: &'static str, e: Option<&PooledEffect>, cells: Option<(u64, u64, u64, u64)>) -> Self {
        OddsRow {
            label: label.into(),
            method,
            odds_ratio: e.map_or(f64::NAN, |e| e.odds_ratio),
            ci_low: e.map_or(f64::NAN, |e| e.ci_low),
            ci_high: e.map_or(f64::NAN, |e| e.ci_high),
            tau2: e.and_then(|e| e.tau2),
            q: e.and_then(|e| e.q),
            strata: e.map_or(0, |e| e.strata),
            corrected: e.map_or(0, |e| e.corrected),
            a: cells.map(|c| c.0),
            b: cells.map(|c| c.1),
            c: cells.map(|c| c.2),
            d: cells.map(|c| c.3),
        }
    }
}

#[derive(Serialize)]
struct CurveRow {
    k: f64,
    f1: f64,
    f0: f64,
    interpolated: bool,
}

#[derive(Serialize)]
struct TrialRow {
    trial: usize,
    auuc: f64,
    repeated: bool,
    features: String,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    metric: &'a str,
    value: &'a str,
}

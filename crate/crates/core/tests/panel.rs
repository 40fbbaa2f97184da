use o2o_core::panel::{
    event_study, fit_fixed_effects, FeConfig, PanelOptions, PanelRow, REFERENCE_DAY,
};
use o2o_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Spec {
    users: usize,
    campaigns: usize,
    effect: f64,
    visit_day_effect: f64,
    user_sd: f64,
    day_sd: f64,
    confounder: f64,
    missing_rate: f64,
}

impl Default for Spec {
    fn default() -> Self {
        Spec {
            users: 400,
            campaigns: 5,
            effect: 2.4,
            visit_day_effect: 0.0,
            user_sd: 4.0,
            day_sd: 3.0,
            confounder: 0.0,
            missing_rate: 0.0,
        }
    }
}

fn panel(spec: &Spec, seed: u64) -> Vec<PanelRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user = Normal::new(0.0, spec.user_sd).unwrap();
    let day = Normal::new(0.0, spec.day_sd).unwrap();
    let mut rows = Vec::new();
    for i in 0..spec.users {
        let treated = i % 2 == 0;
        let campaign = i % spec.campaigns;
        let first = 18_300 + rng.random_range(0..60);
        let u = user.sample(&mut rng) + if treated { spec.confounder } else { 0.0 };
        let level = 35.0 + campaign as f64 + u;
        for s in -3..=3 {
            let mut d = level + day.sample(&mut rng);
            if treated && s > 0 {
                d += spec.effect;
            }
            if treated && s == 0 {
                d += spec.visit_day_effect;
            }
            let missing = rng.random::<f64>() < spec.missing_rate;
            let dayi = first + i64::from(s);
            rows.push(PanelRow {
                user_id: format!("u{i:05}"),
                campaign_id: format!("c{campaign}"),
                s,
                d: if missing { 0.0 } else { d },
                treated,
                day: dayi,
                dow: o2o_core::panel::day_of_week(dayi),
                missing,
            });
        }
    }
    rows
}

#[test]
fn planted_effect_is_recovered() {
    let p = panel(&Spec::default(), 1);
    let fit = fit_fixed_effects(&p, FeConfig { ad: true, day: true, ..Default::default() }, &PanelOptions::default()).unwrap();
    assert!(fit.ci_low <= 2.4 && 2.4 <= fit.ci_high, "{fit:?}");
    assert!(fit.std_err > 0.0);
    assert!(fit.p_value < 0.05);
}

#[test]
fn within_transform_equals_user_dummies() {
    let spec = Spec { users: 40, missing_rate: 0.1, ..Spec::default() };
    let p = panel(&spec, 7);
    for cfg in [FeConfig::MODEL_3, FeConfig::MODEL_4] {
        let within = fit_fixed_effects(&p, cfg, &PanelOptions::default()).unwrap();
        let opts = PanelOptions { explicit_customer_dummies: true, ..Default::default() };
        let dummies = fit_fixed_effects(&p, cfg, &opts).unwrap();
        assert!((within.beta - dummies.beta).abs() < 1e-6, "{} vs {}", within.beta, dummies.beta);
        assert!((within.std_err - dummies.std_err).abs() < 1e-6);
        assert_eq!(within.df_resid, dummies.df_resid);
    }
}

#[test]
fn customer_effects_absorb_ad_dummies() {
    let p = panel(&Spec::default(), 3);
    let fit = fit_fixed_effects(&p, FeConfig::MODEL_3, &PanelOptions::default()).unwrap();
    assert_eq!(fit.dropped.iter().filter(|d| d.starts_with("ad[")).count(), 4);
    let fit1 = fit_fixed_effects(&p, FeConfig::MODEL_1, &PanelOptions::default()).unwrap();
    assert!(fit1.dropped.is_empty());
}

#[test]
fn user_level_confounder_is_removed_by_customer_effects() {
    let spec = Spec { users: 2000, confounder: 2.0, ..Spec::default() };
    let p = panel(&spec, 11);
    let ad = fit_fixed_effects(&p, FeConfig::MODEL_1, &PanelOptions::default()).unwrap();
    let cust = fit_fixed_effects(&p, FeConfig::MODEL_3, &PanelOptions::default()).unwrap();
    assert!(ad.beta - 2.4 > 0.5, "{}", ad.beta);
    assert!((cust.beta - 2.4).abs() < 0.3, "{}", cust.beta);
}

#[test]
fn configs_agree_without_heterogeneity() {
    let spec = Spec { users: 3000, user_sd: 0.5, day_sd: 1.0, ..Spec::default() };
    let p = panel(&spec, 5);
    let betas: Vec<f64> = FeConfig::STANDARD
        .iter()
        .map(|&c| fit_fixed_effects(&p, c, &PanelOptions::default()).unwrap().beta)
        .collect();
    let lo = betas.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = betas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi - lo < 0.1, "{betas:?}");
}

#[test]
fn baseline_is_control_post_mean() {
    let spec = Spec { missing_rate: 0.2, ..Spec::default() };
    let p = panel(&spec, 9);
    let fit = fit_fixed_effects(&p, FeConfig::MODEL_1, &PanelOptions::default()).unwrap();
    let xs: Vec<f64> = p.iter().filter(|r| !r.treated && r.s > 0 && !r.missing).map(|r| r.d).collect();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    assert!((fit.baseline - m).abs() < 1e-12);
    assert!(fit.baseline_std_err > 0.0);
}

#[test]
fn visit_day_can_be_excluded() {
    let spec = Spec { visit_day_effect: 5.0, ..Spec::default() };
    let p = panel(&spec, 13);
    let opts = PanelOptions { include_visit_day: false, ..Default::default() };
    let fit = fit_fixed_effects(&p, FeConfig::MODEL_3, &opts).unwrap();
    assert_eq!(fit.n_obs, p.iter().filter(|r| r.s != 0).count());
    assert!(fit.ci_low <= 2.4 && 2.4 <= fit.ci_high);
}

#[test]
fn effect_column_without_variation_is_rank_deficient() {
    let mut p = panel(&Spec::default(), 2);
    p.iter_mut().for_each(|r| r.treated = false);
    let err = fit_fixed_effects(&p, FeConfig::MODEL_4, &PanelOptions::default()).unwrap_err();
    assert!(matches!(err, Error::RankDeficient(_)), "{err}");
}

#[test]
fn customer_effects_need_two_rows() {
    let mut p = panel(&Spec { users: 10, ..Spec::default() }, 2);
    p.retain(|r| !(r.user_id == "u00000" && r.s != 0));
    let err = fit_fixed_effects(&p, FeConfig::MODEL_3, &PanelOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
    assert!(fit_fixed_effects(&[], FeConfig::MODEL_1, &PanelOptions::default()).is_err());
}

#[test]
fn event_study_reference_and_visit_day_spike() {
    let spec = Spec { effect: 0.0, visit_day_effect: 4.0, users: 1000, ..Spec::default() };
    let p = panel(&spec, 21);
    let es = event_study(&p).unwrap();
    assert_eq!(es.len(), 7);
    assert_eq!(es[0].s, REFERENCE_DAY);
    assert_eq!((es[0].coef, es[0].ci_low, es[0].ci_high), (0.0, 0.0, 0.0));
    for c in &es[1..] {
        let significant_positive = c.ci_low > 0.0;
        assert_eq!(significant_positive, c.s == 0, "{c:?}");
    }
}

#[test]
fn event_study_null_covers_zero() {
    let spec = Spec { effect: 0.0, ..Spec::default() };
    let mut covered = 0;
    for seed in 0..20 {
        let es = event_study(&panel(&spec, 100 + seed)).unwrap();
        if es.iter().all(|c| c.ci_low <= 0.0 && 0.0 <= c.ci_high) {
            covered += 1;
        }
    }
    assert!(covered >= 18, "{covered}/20");
}

#[test]
fn null_effect_rarely_significant() {
    // Customer effects are needed here: without them HC1 ignores within-user correlation.
    let spec = Spec { effect: 0.0, ..Spec::default() };
    let hits = (0..20)
        .filter(|&seed| {
            let p = panel(&spec, 200 + seed);
            let fit = fit_fixed_effects(&p, FeConfig::MODEL_3, &PanelOptions::default()).unwrap();
            fit.p_value < 0.05
        })
        .count();
    assert!(hits <= 2, "{hits}/20");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constant_shift_leaves_beta(seed in 0u64..1000, shift in -50.0f64..50.0, cfg in 0usize..4) {
        let p = panel(&Spec { users: 60, ..Spec::default() }, seed);
        let cfg = FeConfig::STANDARD[cfg];
        let a = fit_fixed_effects(&p, cfg, &PanelOptions::default()).unwrap();
        let shifted: Vec<PanelRow> = p.iter().cloned().map(|mut r| { if !r.missing { r.d += shift; } r }).collect();
        let b = fit_fixed_effects(&shifted, cfg, &PanelOptions::default()).unwrap();
        prop_assert!((a.beta - b.beta).abs() < 1e-8);
    }

    #[test]
    fn user_shift_leaves_customer_beta(seed in 0u64..1000, shift in -20.0f64..20.0) {
        let p = panel(&Spec { users: 60, ..Spec::default() }, seed);
        let a = fit_fixed_effects(&p, FeConfig::MODEL_3, &PanelOptions::default()).unwrap();
        let shifted: Vec<PanelRow> = p.iter().cloned().map(|mut r| {
            if r.treated { r.d += shift; }
            r
        }).collect();
        let b = fit_fixed_effects(&shifted, FeConfig::MODEL_3, &PanelOptions::default()).unwrap();
        prop_assert!((a.beta - b.beta).abs() < 1e-8);
    }
}

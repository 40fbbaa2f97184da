use std::path::Path;

use o2o_core::pipeline::{
    parse_config, report, run, validate, Level, LoadedConfig, PipelineConfig, StageStatus, ARTIFACTS,
    EFFECTIVE_CONFIG_FILE, FAILED_FILE, MANIFEST_FILE,
};
use o2o_core::simulator::{generate, SimConfig};
use o2o_core::Error;

fn small_sim(dir: &Path, seed: u64) {
    let cfg = SimConfig { n_campaigns: 4, users_per_campaign: 60, city_places: 40, ..SimConfig::new(seed) };
    generate(&cfg).unwrap().write_dir(dir).unwrap();
}

fn quick(inputs: &Path, out: &Path, seed: u64) -> LoadedConfig {
    let mut c = PipelineConfig::new(seed);
    c.inputs.dir = inputs.to_path_buf();
    c.output_dir = out.to_path_buf();
    c.uplift.search_budget = 20;
    c.uplift.permutations = 19;
    c.uplift.gbdt.n_estimators = 20;
    c.uplift.gbdt.max_depth = 3;
    LoadedConfig::from_config(c, "/")
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn golden_path_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (inp, out) = (tmp.path().join("in"), tmp.path().join("out"));
    small_sim(&inp, 1);
    let cfg = quick(&inp, &out, 1);
    assert!(validate(&cfg).is_empty(), "{:?}", validate(&cfg));
    let rep = run(&cfg).unwrap();
    for (_, name) in ARTIFACTS {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert!(rep.manifest.stages.iter().all(|s| s.status == StageStatus::Ok));
    let listed: Vec<&str> = rep.manifest.files.iter().map(|f| f.path.as_str()).collect();
    for entry in std::fs::read_dir(&out).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name != MANIFEST_FILE {
            assert!(listed.contains(&name.as_str()), "{name} missing from manifest");
        }
    }
    assert!(rep.manifest.files.iter().all(|f| f.sha256.len() == 64));
    let svg = std::fs::read_to_string(out.join("uplift_curve.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    let summary = report(&out).unwrap();
    assert!(summary.failed.is_none());
    assert!(summary.highlights.iter().any(|(s, _)| s == "panel"));
    assert!(summary.highlights.iter().any(|(s, _)| s == "uplift"));

    std::fs::write(out.join("panel_table.csv"), "tampered\n").unwrap();
    assert!(report(&out).is_err());
}

#[test]
fn identical_runs_give_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let inp = tmp.path().join("in");
    small_sim(&inp, 2);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&quick(&inp, &a, 2)).unwrap();
    run(&quick(&inp, &b, 2)).unwrap();
    let (ca, cb) = (csvs(&a), csvs(&b));
    assert!(ca.len() >= 8);
    assert_eq!(ca, cb);
    for svg in ["dominance_map.svg", "revisit_odds.svg", "feature_importance.svg"] {
        assert_eq!(std::fs::read(a.join(svg)).unwrap(), std::fs::read(b.join(svg)).unwrap());
    }
}

#[test]
fn disabled_uplift_is_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let (inp, out) = (tmp.path().join("in"), tmp.path().join("out"));
    small_sim(&inp, 3);
    let mut cfg = quick(&inp, &out, 3);
    cfg.config.stages.uplift = false;
    cfg.config.stages.gwr = false;
    let rep = run(&cfg).unwrap();
    assert_eq!(rep.manifest.stage("uplift").unwrap().status, StageStatus::Skipped);
    for (stage, name) in ARTIFACTS {
        assert_eq!(out.join(name).exists(), stage != "uplift" && stage != "gwr", "{name}");
    }
    assert!(!out.join("model.json").exists());
    assert!(out.join(EFFECTIVE_CONFIG_FILE).is_file());
}

#[test]
fn missing_assignments_fail_in_trajectory_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let (inp, out) = (tmp.path().join("in"), tmp.path().join("out"));
    small_sim(&inp, 4);
    std::fs::remove_file(inp.join("assignments.csv")).unwrap();
    let cfg = quick(&inp, &out, 4);
    assert!(validate(&cfg).iter().any(|d| d.level == Level::Error && d.path == "inputs.assignments"));
    match run(&cfg) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "trajectory");
            assert!(source.is_user_error());
        }
        other => panic!("{other:?}"),
    }
    let marker = std::fs::read_to_string(out.join(FAILED_FILE)).unwrap();
    assert!(marker.contains("trajectory"));
    assert!(out.join(EFFECTIVE_CONFIG_FILE).is_file());
    assert!(report(&out).unwrap().failed.is_some());
}

#[test]
fn unbalanced_treatment_share_is_an_error() {
    let l = parse_config("seed = 1\n[simulate]\ntreatment_share = 0.3\n", Path::new("."), &[]).unwrap();
    let d = l.check();
    assert_eq!(d.len(), 1, "{d:?}");
    assert_eq!(d[0].level, Level::Error);
    assert_eq!(d[0].path, "simulate.treatment_share");
    assert!(d[0].message.contains("balanced random assignment"));

    let l = parse_config("seed = 1\n[stages]\nuplift = false\n[simulate]\ntreatment_share = 0.3\n", Path::new("."), &[]).unwrap();
    assert!(l.check().is_empty());

    let tmp = tempfile::tempdir().unwrap();
    let cfg = SimConfig { n_campaigns: 2, users_per_campaign: 30, city_places: 20, treatment_share: 0.3, ..SimConfig::new(9) };
    generate(&cfg).unwrap().write_dir(tmp.path()).unwrap();
    let l = quick(tmp.path(), &tmp.path().join("out"), 9);
    let diags = validate(&l);
    assert!(diags.iter().any(|d| d.path == "inputs.assignments" && d.message.contains("balanced")), "{diags:?}");
    assert!(run(&l).is_err());
}

#[test]
fn unknown_keys_are_reported_with_paths() {
    let l = parse_config("seed = 1\nbogus = 2\n[panel]\nevent_studdy = true\n", Path::new("."), &[]).unwrap();
    let diags = l.check();
    let paths: Vec<&str> = diags.iter().map(|d| d.path.as_str()).collect();
    assert_eq!(paths, vec!["bogus", "panel.event_studdy"]);
    assert!(matches!(run(&l), Err(Error::Config(_))));
}

#[test]
fn valid_config_has_no_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    small_sim(tmp.path(), 5);
    std::fs::write(tmp.path().join("run.toml"), "seed = 5\n[uplift]\npermutations = 99\n").unwrap();
    let l = o2o_core::pipeline::load_config(&tmp.path().join("run.toml"), &["gwr.kernel=gaussian".into()]).unwrap();
    assert_eq!(l.config.uplift.permutations, 99);
    assert!(validate(&l).is_empty(), "{:?}", validate(&l));
}

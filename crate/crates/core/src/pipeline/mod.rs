//! End-to-end runs: configuration, validation, stage execution and the report bundle.
//!
//! A run reads the five input files, executes the enabled stages in dependency order
//! (trajectory, then gwr, panel and revisit, then uplift) and writes CSV tables, SVG figures,
//! the effective config and a manifest hashing every output into the output directory.

mod config;
mod stages;
pub mod svg;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    apply_override, load_config, parse_config, Diagnostic, GwrConfig, InputsConfig, Level, LoadedConfig,
    PanelConfig, PipelineConfig, RevisitConfig, StagesConfig, TrajectoryConfig, UpliftConfig,
};

use crate::error::{Error, Result};
use crate::trajectory::{index_campaigns, read_assignments, read_campaigns, read_places, CategoryRegistry};
use crate::uplift::TREATMENT_SHARE_RANGE;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILED_FILE: &str = "FAILED";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.effective.toml";

/// Stage names in execution order.
pub const STAGES: [&str; 5] = ["trajectory", "gwr", "panel", "revisit", "uplift"];

/// The eight report artifacts and the stage producing each.
pub const ARTIFACTS: [(&str, &str); 8] = [
    ("trajectory", "dominance_map.svg"),
    ("gwr", "gwr_table.csv"),
    ("gwr", "gwr_prediction.svg"),
    ("panel", "panel_table.csv"),
    ("panel", "event_study.svg"),
    ("revisit", "revisit_odds.svg"),
    ("uplift", "uplift_curve.svg"),
    ("uplift", "feature_importance.svg"),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config_sha256: String,
    pub inputs: Vec<FileEntry>,
    pub stages: Vec<StageRecord>,
    /// Every output file except the manifest itself.
    pub files: Vec<FileEntry>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut f = File::open(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut n = 0u64;
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        n += k as u64;
        h.update(&buf[..k]);
    }
    Ok((hex::encode(h.finalize()), n))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| Error::File { path: path.to_path_buf(), source })
}

/// Demographic columns keyed by user id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Demographics {
    pub names: Vec<String>,
    pub values: HashMap<String, Vec<f64>>,
}

/// Reads `user_id,<feature>...` with a header row. Empty or unparsable cells become NaN.
pub fn read_demographics<R: Read>(reader: R) -> Result<Demographics> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("user_id") || header.len() < 2 {
        return Err(Error::invalid("demographics header must be user_id followed by feature names"));
    }
    let names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut values = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let user = row.get(0).unwrap_or_default().to_string();
        let v: Vec<f64> = (1..header.len())
            .map(|j| row.get(j).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN))
            .collect();
        if values.insert(user.clone(), v).is_some() {
            return Err(Error::invalid(format!("user {user} appears twice in demographics")));
        }
    }
    Ok(Demographics { names, values })
}

/// Schema checks plus referential checks on the small input files. Pings are only checked
/// for existence and a readable first line.
pub fn validate(loaded: &LoadedConfig) -> Vec<Diagnostic> {
    let mut out = loaded.check();
    let c = &loaded.config;
    if !c.stages.trajectory {
        return out;
    }
    let inp = &c.inputs;
    let required = [
        ("inputs.pings", &inp.pings),
        ("inputs.places", &inp.places),
        ("inputs.assignments", &inp.assignments),
        ("inputs.campaigns", &inp.campaigns),
    ];
    let mut missing = false;
    for (key, file) in required {
        let p = loaded.input_path(file);
        if !p.is_file() {
            out.push(Diagnostic::error(key, format!("{} does not exist", p.display())));
            missing = true;
        }
    }
    let demo = loaded.input_path(&inp.demographics);
    if c.stages.uplift && c.uplift.use_demographics && !demo.is_file() {
        out.push(Diagnostic::warning(
            "inputs.demographics",
            format!("{} does not exist; demographic features are dropped", demo.display()),
        ));
    }
    if missing {
        return out;
    }
    if let Err(e) = open(&loaded.input_path(&inp.pings)).and_then(|mut r| {
        let mut line = String::new();
        r.read_line(&mut line)?;
        Ok(line)
    }) {
        out.push(Diagnostic::error("inputs.pings", e.to_string()));
    }
    let places = open(&loaded.input_path(&inp.places)).and_then(|r| read_places(r, &CategoryRegistry::default()));
    let campaigns = open(&loaded.input_path(&inp.campaigns)).and_then(read_campaigns);
    let assignments = open(&loaded.input_path(&inp.assignments)).and_then(read_assignments);
    let (places, campaigns, assignments) = match (places, campaigns, assignments) {
        (Ok(p), Ok(c), Ok(a)) => (p, c, a),
        (p, c, a) => {
            for (key, e) in [("inputs.places", p.err()), ("inputs.campaigns", c.err()), ("inputs.assignments", a.err())] {
                if let Some(e) = e {
                    out.push(Diagnostic::error(key, e.to_string()));
                }
            }
            return out;
        }
    };
    for (key, n) in [
        ("inputs.places", places.rejected.len()),
        ("inputs.campaigns", campaigns.rejected.len()),
        ("inputs.assignments", assignments.rejected.len()),
    ] {
        if n > 0 {
            out.push(Diagnostic::warning(key, format!("{n} malformed rows would be skipped")));
        }
    }
    let place_ids: std::collections::HashSet<&str> = places.items.iter().map(|p| p.place_id.as_str()).collect();
    for camp in &campaigns.items {
        if !place_ids.contains(camp.target_place_id.as_str()) {
            out.push(Diagnostic::error(
                "inputs.campaigns",
                format!("campaign {} targets unknown place {}", camp.campaign_id, camp.target_place_id),
            ));
        }
    }
    if let Err(e) = index_campaigns(&assignments.items, &campaigns.items) {
        out.push(Diagnostic::error("inputs.assignments", e.to_string()));
    }
    if c.stages.uplift && !assignments.items.is_empty() {
        let treated = assignments.items.iter().filter(|a| a.group.is_treated()).count();
        let share = treated as f64 / assignments.items.len() as f64;
        let (lo, hi) = TREATMENT_SHARE_RANGE;
        if !(lo..=hi).contains(&share) {
            out.push(Diagnostic::error("inputs.assignments", config::balance_message(share)));
        }
    }
    out
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
}

pub(crate) struct Outputs {
    pub dir: PathBuf,
    pub written: Vec<String>,
}

impl Outputs {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, body).map_err(|source| Error::File { path: p, source })?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn csv<S: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = S>) -> Result<()> {
        let p = self.path(name);
        let f = File::create(&p).map_err(|source| Error::File { path: p.clone(), source })?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(f));
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }
}

fn entries(dir: &Path, names: &[String]) -> Result<Vec<FileEntry>> {
    names
        .iter()
        .map(|n| {
            let (sha256, bytes) = sha256_file(&dir.join(n))?;
            Ok(FileEntry { path: n.clone(), sha256, bytes })
        })
        .collect()
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let p = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(m)? + "\n";
    std::fs::write(&p, body).map_err(|source| Error::File { path: p, source })
}

fn input_entries(loaded: &LoadedConfig) -> Vec<FileEntry> {
    let i = &loaded.config.inputs;
    [&i.pings, &i.places, &i.assignments, &i.campaigns, &i.demographics]
        .into_iter()
        .filter_map(|f| {
            let p = loaded.input_path(f);
            sha256_file(&p).ok().map(|(sha256, bytes)| FileEntry { path: p.display().to_string(), sha256, bytes })
        })
        .collect()
}

/// Runs every enabled stage. On a stage failure the outputs written so far are kept, a
/// `FAILED` marker names the stage, and the error is returned as [`Error::Stage`].
pub fn run(loaded: &LoadedConfig) -> Result<RunReport> {
    let errors: Vec<String> =
        loaded.check().into_iter().filter(|d| d.level == Level::Error).map(|d| d.to_string()).collect();
    if !errors.is_empty() {
        return Err(Error::Config(errors.join("; ")));
    }
    let cfg = &loaded.config;
    let dir = loaded.output_dir();
    std::fs::create_dir_all(&dir).map_err(|source| Error::File { path: dir.clone(), source })?;
    for stale in [FAILED_FILE, MANIFEST_FILE] {
        let p = dir.join(stale);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|source| Error::File { path: p, source })?;
        }
    }
    let mut out = Outputs { dir: dir.clone(), written: Vec::new() };
    let effective = cfg.effective_toml()?;
    out.text(EFFECTIVE_CONFIG_FILE, &effective)?;
    let config_sha256 = hex::encode(Sha256::digest(effective.as_bytes()));

    let mut manifest = Manifest {
        tool: "o2o".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        config_sha256,
        inputs: input_entries(loaded),
        stages: Vec::new(),
        files: Vec::new(),
        warnings: Vec::new(),
    };
    let s = cfg.stages;
    let enabled = [s.trajectory, s.gwr, s.panel, s.revisit, s.uplift];
    let mut state = stages::State::new(loaded);
    let mut failure = None;
    for (name, on) in STAGES.into_iter().zip(enabled) {
        if !on || failure.is_some() {
            manifest.stages.push(StageRecord {
                name: name.into(),
                status: StageStatus::Skipped,
                seconds: 0.0,
                files: Vec::new(),
                error: None,
            });
            continue;
        }
        log::info!("stage {name}");
        let before = out.written.len();
        let t0 = Instant::now();
        let res = state.run_stage(name, &mut out);
        let seconds = t0.elapsed().as_secs_f64();
        let files = out.written[before..].to_vec();
        match res {
            Ok(()) => manifest.stages.push(StageRecord { name: name.into(), status: StageStatus::Ok, seconds, files, error: None }),
            Err(e) => {
                log::error!("stage {name} failed: {e}");
                manifest.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    seconds,
                    files,
                    error: Some(e.to_string()),
                });
                failure = Some((name, e));
            }
        }
    }
    manifest.warnings = std::mem::take(&mut state.warnings);
    manifest.files = entries(&dir, &out.written)?;
    if let Some((stage, e)) = failure {
        let p = dir.join(FAILED_FILE);
        std::fs::write(&p, format!("stage: {stage}\nerror: {e}\n")).map_err(|source| Error::File { path: p, source })?;
        write_manifest(&dir, &manifest)?;
        return Err(Error::Stage { stage, source: Box::new(e) });
    }
    write_manifest(&dir, &manifest)?;
    Ok(RunReport { output_dir: dir, manifest })
}

/// A verified report bundle.
#[derive(Clone, Debug)]
pub struct BundleSummary {
    pub manifest: Manifest,
    /// Contents of the `FAILED` marker, if present.
    pub failed: Option<String>,
    /// Key numbers per stage, as `(stage, line)`.
    pub highlights: Vec<(String, String)>,
}

fn read_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Checks every hash in the manifest and collects headline results.
pub fn report(dir: &Path) -> Result<BundleSummary> {
    let mp = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_reader(open(&mp)?)?;
    for f in &manifest.files {
        let (sha, bytes) = sha256_file(&dir.join(&f.path))?;
        if sha != f.sha256 || bytes != f.bytes {
            return Err(Error::invalid(format!("{} does not match its manifest hash", f.path)));
        }
    }
    let failed = std::fs::read_to_string(dir.join(FAILED_FILE)).ok();
    let mut highlights = Vec::new();
    let has = |n: &str| manifest.files.iter().any(|f| f.path == n);
    if has("panel_table.csv") {
        for r in read_rows(&dir.join("panel_table.csv"))? {
            highlights.push((
                "panel".into(),
                format!("{}: beta {} km [{}, {}]", r["model"], short(&r["beta"]), short(&r["ci_low"]), short(&r["ci_high"])),
            ));
        }
    }
    if has("revisit_odds.csv") {
        for r in read_rows(&dir.join("revisit_odds.csv"))?.into_iter().filter(|r| r["label"] == "pooled") {
            highlights.push((
                "revisit".into(),
                format!("{}: OR {} [{}, {}]", r["method"], short(&r["odds_ratio"]), short(&r["ci_low"]), short(&r["ci_high"])),
            ));
        }
    }
    if has("gwr_table.csv") {
        for r in read_rows(&dir.join("gwr_table.csv"))?.into_iter().filter(|r| r["feature"] == "distance_km") {
            highlights.push((
                "gwr".into(),
                format!("{}: mean distance coefficient {} (p {})", r["model"], short(&r["mean"]), short(&r["p_value"])),
            ));
        }
    }
    if has("uplift_summary.csv") {
        for r in read_rows(&dir.join("uplift_summary.csv"))? {
            highlights.push(("uplift".into(), format!("{}: {}", r["metric"], short(&r["value"]))));
        }
    }
    Ok(BundleSummary { manifest, failed, highlights })
}

fn short(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) if v != 0.0 && v.abs() < 1e-3 => format!("{v:.2e}"),
        Ok(v) => format!("{v:.4}"),
        Err(_) => s.to_string(),
    }
}

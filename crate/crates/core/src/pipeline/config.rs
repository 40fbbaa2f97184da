//! Run configuration: a single TOML file, optionally patched by `key.path=value` overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::FeConfig;
use crate::revisit::DEFAULT_WINDOW_DAYS;
use crate::simulator::{
    SimConfig, ASSIGNMENTS_FILE, CAMPAIGNS_FILE, DEMOGRAPHICS_FILE, PINGS_FILE, PLACES_FILE,
};
use crate::spatial::{BandwidthKind, Kernel};
use crate::trajectory::{DEFAULT_CELL_SIZE_DEG, DEFAULT_GRID_RADIUS_M, MIN_DWELL_S, VISIT_RADIUS_M};
use crate::uplift::{GbdtParams, DEFAULT_SPLIT, TREATMENT_SHARE_RANGE};

fn d_output() -> PathBuf {
    PathBuf::from("o2o-report")
}

/// Input files, relative to `dir`, which is itself relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputsConfig {
    pub dir: PathBuf,
    pub pings: PathBuf,
    pub places: PathBuf,
    pub assignments: PathBuf,
    pub campaigns: PathBuf,
    /// Optional; a missing file only drops the demographic uplift features.
    pub demographics: PathBuf,
}

impl Default for InputsConfig {
    fn default() -> Self {
        InputsConfig {
            dir: PathBuf::from("."),
            pings: PINGS_FILE.into(),
            places: PLACES_FILE.into(),
            assignments: ASSIGNMENTS_FILE.into(),
            campaigns: CAMPAIGNS_FILE.into(),
            demographics: DEMOGRAPHICS_FILE.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagesConfig {
    pub trajectory: bool,
    pub gwr: bool,
    pub panel: bool,
    pub revisit: bool,
    pub uplift: bool,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig { trajectory: true, gwr: true, panel: true, revisit: true, uplift: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub visit_radius_m: f64,
    pub min_dwell_s: i64,
    /// Local time minus UTC, seconds.
    pub day_offset_s: i64,
    pub cell_size_deg: f64,
    pub grid_radius_m: f64,
    pub home_cell_deg: f64,
    /// Days after the first visit whose stays enter the dominance grid.
    pub post_visit_days: i64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            visit_radius_m: VISIT_RADIUS_M,
            min_dwell_s: MIN_DWELL_S,
            day_offset_s: 9 * 3600,
            cell_size_deg: DEFAULT_CELL_SIZE_DEG,
            grid_radius_m: DEFAULT_GRID_RADIUS_M,
            home_cell_deg: DEFAULT_CELL_SIZE_DEG,
            post_visit_days: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GwrConfig {
    pub kernel: Kernel,
    pub bandwidth: BandwidthKind,
    pub per_feature: bool,
    /// Also fit the model with food and shopping shares.
    pub with_shares: bool,
    /// Labelled cells above this count are subsampled with the master seed; 0 keeps all.
    pub max_locations: usize,
}

impl Default for GwrConfig {
    fn default() -> Self {
        GwrConfig {
            kernel: Kernel::Bisquare,
            bandwidth: BandwidthKind::Adaptive,
            per_feature: false,
            with_shares: true,
            max_locations: 800,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelConfig {
    /// Fixed-effect sets such as `Ad+Customer`.
    pub models: Vec<String>,
    pub include_visit_day: bool,
    pub explicit_customer_dummies: bool,
    pub event_study: bool,
}

impl Default for PanelConfig {
    fn default() -> Self {
        PanelConfig {
            models: FeConfig::STANDARD.iter().map(|c| c.to_string()).collect(),
            include_visit_day: true,
            explicit_customer_dummies: false,
            event_study: true,
        }
    }
}

impl PanelConfig {
    pub fn fe_configs(&self) -> Result<Vec<FeConfig>> {
        self.models.iter().map(|m| FeConfig::parse(m)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RevisitConfig {
    pub window_days: i64,
}

impl Default for RevisitConfig {
    fn default() -> Self {
        RevisitConfig { window_days: DEFAULT_WINDOW_DAYS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpliftConfig {
    /// Selection, training and evaluation fractions.
    pub split: Vec<f64>,
    pub feature_search: bool,
    pub search_budget: usize,
    pub importance_repeats: usize,
    pub permutations: usize,
    pub use_demographics: bool,
    pub gbdt: GbdtParams,
}

impl Default for UpliftConfig {
    fn default() -> Self {
        UpliftConfig {
            split: DEFAULT_SPLIT.to_vec(),
            feature_search: true,
            search_budget: 200,
            importance_repeats: 10,
            permutations: 199,
            use_demographics: true,
            gbdt: GbdtParams::default(),
        }
    }
}

/// Everything a run needs. Only `seed` is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub inputs: InputsConfig,
    #[serde(default)]
    pub stages: StagesConfig,
    #[serde(default)]
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub gwr: GwrConfig,
    #[serde(default)]
    pub panel: PanelConfig,
    #[serde(default)]
    pub revisit: RevisitConfig,
    #[serde(default)]
    pub uplift: UpliftConfig,
    /// Simulator settings for `o2o simulate`; `seed` falls back to the master seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<toml::Table>,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        PipelineConfig {
            seed,
            output_dir: d_output(),
            inputs: InputsConfig::default(),
            stages: StagesConfig::default(),
            trajectory: TrajectoryConfig::default(),
            gwr: GwrConfig::default(),
            panel: PanelConfig::default(),
            revisit: RevisitConfig::default(),
            uplift: UpliftConfig::default(),
            simulate: None,
        }
    }

    /// Simulator settings from the `[simulate]` table, defaults otherwise.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut table = self.simulate.clone().unwrap_or_default();
        table.entry("seed").or_insert(toml::Value::Integer(self.seed as i64));
        table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("simulate: {}", e.message())))
    }

    /// TOML text with every default filled in.
    pub fn effective_toml(&self) -> Result<String> {
        let mut c = self.clone();
        if c.simulate.is_some() {
            let sim = self.sim_config()?;
            c.simulate = Some(
                toml::Table::try_from(&sim).map_err(|e| Error::Config(format!("simulate: {e}")))?,
            );
        }
        toml::to_string(&c).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Warning,
    Error,
}

/// One validation finding, located by a dotted key path or an input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub level: Level,
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn error(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { level: Level::Error, path: path.into(), message: message.into() }
    }

    pub fn warning(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { level: Level::Warning, path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lvl = match self.level {
            Level::Error => "error",
            Level::Warning => "warning",
        };
        write!(f, "{lvl}: {}: {}", self.path, self.message)
    }
}

/// A parsed config together with where it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    /// Dotted paths of keys the schema does not know.
    pub unknown_keys: Vec<String>,
}

impl LoadedConfig {
    pub fn from_config(config: PipelineConfig, base_dir: impl Into<PathBuf>) -> Self {
        LoadedConfig { config, base_dir: base_dir.into(), unknown_keys: Vec::new() }
    }

    pub fn input_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.inputs.dir)
    }

    pub fn input_path(&self, file: &Path) -> PathBuf {
        self.input_dir().join(file)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.config.output_dir)
    }

    /// Schema-level findings: unknown keys and out-of-range parameters. No files are read.
    pub fn check(&self) -> Vec<Diagnostic> {
        let mut out: Vec<Diagnostic> =
            self.unknown_keys.iter().map(|k| Diagnostic::error(k.clone(), "unknown key")).collect();
        let c = &self.config;
        let s = c.stages;
        let deps = [
            (s.gwr, "gwr", s.trajectory, "trajectory"),
            (s.panel, "panel", s.trajectory, "trajectory"),
            (s.revisit, "revisit", s.trajectory, "trajectory"),
            (s.uplift, "uplift", s.revisit, "revisit"),
        ];
        for (on, name, dep_on, dep) in deps {
            if on && !dep_on {
                out.push(Diagnostic::error(format!("stages.{name}"), format!("needs stage {dep}")));
            }
        }
        let t = &c.trajectory;
        if !(t.visit_radius_m > 0.0) {
            out.push(Diagnostic::error("trajectory.visit_radius_m", "must be positive"));
        }
        if t.min_dwell_s < 0 {
            out.push(Diagnostic::error("trajectory.min_dwell_s", "must not be negative"));
        }
        for (k, v) in [("cell_size_deg", t.cell_size_deg), ("grid_radius_m", t.grid_radius_m), ("home_cell_deg", t.home_cell_deg)] {
            if !(v > 0.0) || !v.is_finite() {
                out.push(Diagnostic::error(format!("trajectory.{k}"), "must be positive"));
            }
        }
        if t.post_visit_days < 1 {
            out.push(Diagnostic::error("trajectory.post_visit_days", "must be at least 1"));
        }
        match c.panel.fe_configs() {
            Ok(v) if v.iter().any(|f| !f.ad) => out.push(Diagnostic::error(
                "panel.models",
                "every model needs the Ad effects",
            )),
            Ok(v) if v.is_empty() && s.panel => {
                out.push(Diagnostic::error("panel.models", "at least one model is required"))
            }
            Ok(_) => {}
            Err(e) => out.push(Diagnostic::error("panel.models", e.to_string())),
        }
        if c.revisit.window_days < 1 {
            out.push(Diagnostic::error("revisit.window_days", "must be at least 1"));
        }
        let u = &c.uplift;
        if u.split.len() != 3 || u.split.iter().any(|f| !(*f > 0.0)) || (u.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            out.push(Diagnostic::error("uplift.split", "needs three positive fractions summing to 1"));
        }
        if u.feature_search && u.search_budget < crate::uplift::MIN_BUDGET {
            out.push(Diagnostic::error(
                "uplift.search_budget",
                format!("must be at least {}", crate::uplift::MIN_BUDGET),
            ));
        }
        if u.importance_repeats == 0 {
            out.push(Diagnostic::error("uplift.importance_repeats", "must be at least 1"));
        }
        if u.permutations == 0 {
            out.push(Diagnostic::error("uplift.permutations", "must be at least 1"));
        }
        if let Err(e) = u.gbdt.validate() {
            out.push(Diagnostic::error("uplift.gbdt", e.to_string()));
        }
        if c.simulate.is_some() {
            match c.sim_config() {
                Ok(sim) => {
                    if let Err(e) = sim.validate() {
                        out.push(Diagnostic::error("simulate", e.to_string()));
                    }
                    let (lo, hi) = TREATMENT_SHARE_RANGE;
                    if s.uplift && !(lo..=hi).contains(&sim.treatment_share) {
                        out.push(Diagnostic::error("simulate.treatment_share", balance_message(sim.treatment_share)));
                    }
                }
                Err(e) => out.push(Diagnostic::error("simulate", e.to_string())),
            }
        }
        out
    }
}

pub(crate) fn balance_message(share: f64) -> String {
    let (lo, hi) = TREATMENT_SHARE_RANGE;
    format!(
        "treatment share {share:.3} is outside [{lo}, {hi}]; the uplift stage requires balanced \
         random assignment"
    )
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies a `a.b.c=value` override; the value is read as TOML, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Parses config text. Unknown keys are collected rather than rejected so `validate` can list
/// them all; `run` refuses them.
pub fn parse_config(text: &str, base_dir: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut unknown = BTreeSet::new();
    let config: PipelineConfig = serde_ignored::deserialize(toml::Value::Table(table), |p| {
        unknown.insert(p.to_string());
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    Ok(LoadedConfig { config, base_dir: base_dir.to_path_buf(), unknown_keys: unknown.into_iter().collect() })
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    parse_config(&text, &base, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown_keys() {
        let l = parse_config("seed = 3\n[gwr]\nkernal = \"gaussian\"\n[uplift.gbdt]\ndepth = 2\n", Path::new("."), &[])
            .unwrap();
        assert_eq!(l.config.gwr, GwrConfig::default());
        assert_eq!(l.unknown_keys, vec!["gwr.kernal".to_string(), "uplift.gbdt.depth".to_string()]);
        assert!(parse_config("output_dir = \"x\"", Path::new("."), &[]).is_err());
    }

    #[test]
    fn overrides_are_typed() {
        let o = ["uplift.permutations=9".to_string(), "gwr.kernel=gaussian".into(), "stages.gwr=false".into()];
        let l = parse_config("seed = 1", Path::new("."), &o).unwrap();
        assert_eq!(l.config.uplift.permutations, 9);
        assert_eq!(l.config.gwr.kernel, Kernel::Gaussian);
        assert!(!l.config.stages.gwr);
        assert!(l.check().is_empty());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut c = PipelineConfig::new(8);
        c.simulate = Some(toml::Table::new());
        let text = c.effective_toml().unwrap();
        let back = parse_config(&text, Path::new("."), &[]).unwrap();
        assert!(back.unknown_keys.is_empty());
        assert_eq!(back.config.sim_config().unwrap(), SimConfig::new(8));
        assert_eq!(back.config.uplift, c.uplift);
    }
}

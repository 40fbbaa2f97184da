//! `o2o`: simulate, validate, run and inspect online-to-offline ad experiment analyses.
//!
//! Exit codes: 0 on success, 1 for user errors (bad config, missing or malformed inputs,
//! failed validation), 2 for internal errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use o2o_core::pipeline::{self, Level, LoadedConfig, PipelineConfig, StageStatus};
use o2o_core::simulator::generate;
use o2o_core::{Error, Result};

#[derive(Parser)]
#[command(name = "o2o", version, about = "Causal analytics for online-to-offline ad experiments")]
struct Cli {
    /// Cap on worker threads for every parallel section (default: all cores)
    #[arg(long, global = true, env = "O2O_THREADS")]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML)
    #[arg(short, long)]
    config: PathBuf,

    /// Override a config key, e.g. `--set uplift.permutations=99`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic experiment with known ground truth
    Simulate {
        /// Directory for the generated input files
        #[arg(short, long)]
        out: Option<PathBuf>,

        /// Read simulator settings from the `[simulate]` table of this run config
        #[arg(short, long)]
        config: Option<PathBuf>,

        /// Seed; overrides the config
        #[arg(long)]
        seed: Option<u64>,

        /// Override a config key, e.g. `--set simulate.n_campaigns=5`
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check a config and its inputs without running any analysis
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run every enabled stage and write the report bundle
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Output directory; overrides the config
        #[arg(short, long, env = "O2O_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
    },
    /// Verify a report bundle against its manifest and print the headline results
    Report {
        /// Output directory of a previous run
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let outcome = std::panic::catch_unwind(|| dispatch(cli.command));
    match outcome {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
        Err(_) => {
            eprintln!("error: internal failure (panic)");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Simulate { out, config, seed, overrides } => simulate(out, config, seed, &overrides),
        Command::Validate { cfg } => validate(&cfg),
        Command::Run { cfg, output_dir } => run(&cfg, output_dir),
        Command::Report { dir } => report(&dir),
    }
}

fn load(args: &ConfigArgs) -> Result<LoadedConfig> {
    pipeline::load_config(&args.config, &args.overrides)
}

fn simulate(out: Option<PathBuf>, config: Option<PathBuf>, seed: Option<u64>, overrides: &[String]) -> Result<ExitCode> {
    let loaded = match &config {
        Some(path) => Some(pipeline::load_config(path, overrides)?),
        None if !overrides.is_empty() => {
            let seed = seed.ok_or_else(|| Error::Config("--seed or --config is required".into()))?;
            Some(pipeline::parse_config(&format!("seed = {seed}"), Path::new("."), overrides)?)
        }
        None => None,
    };
    let (mut sim, default_out) = match &loaded {
        Some(l) => {
            if let Some(k) = l.unknown_keys.first() {
                return Err(Error::Config(format!("unknown key {k}")));
            }
            (l.config.sim_config()?, l.input_dir())
        }
        None => {
            let seed = seed.ok_or_else(|| Error::Config("--seed or --config is required".into()))?;
            (PipelineConfig::new(seed).sim_config()?, PathBuf::from("."))
        }
    };
    if let Some(s) = seed {
        sim.seed = s;
    }
    let dir = out.unwrap_or(default_out);
    let data = generate(&sim)?;
    let files = data.write_dir(&dir)?;
    println!(
        "simulated {} campaigns, {} users, {} pings (seed {})",
        data.campaigns.len(),
        data.assignments.len(),
        data.records.len(),
        sim.seed
    );
    for f in files {
        println!("  {}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(args: &ConfigArgs) -> Result<ExitCode> {
    let loaded = load(args)?;
    let diags = pipeline::validate(&loaded);
    for d in &diags {
        println!("{d}");
    }
    let errors = diags.iter().filter(|d| d.level == Level::Error).count();
    if errors > 0 {
        println!("{errors} error(s)");
        Ok(ExitCode::from(1))
    } else {
        println!("ok ({} warning(s))", diags.len());
        Ok(ExitCode::SUCCESS)
    }
}

fn run(args: &ConfigArgs, output_dir: Option<PathBuf>) -> Result<ExitCode> {
    let mut loaded = load(args)?;
    if let Some(dir) = output_dir {
        loaded.config.output_dir = std::env::current_dir()?.join(dir);
    }
    let rep = pipeline::run(&loaded)?;
    for s in &rep.manifest.stages {
        let status = match s.status {
            StageStatus::Ok => "ok",
            StageStatus::Skipped => "skipped",
            StageStatus::Failed => "FAILED",
        };
        println!("{:<11} {:<8} {:>7.2}s  {}", s.name, status, s.seconds, s.files.join(" "));
    }
    for w in &rep.manifest.warnings {
        println!("warning: {w}");
    }
    println!("report written to {}", rep.output_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn report(dir: &Path) -> Result<ExitCode> {
    let s = pipeline::report(dir)?;
    let m = &s.manifest;
    println!("{} {} seed {} ({} files verified)", m.tool, m.version, m.seed, m.files.len());
    for st in &m.stages {
        println!("  {:<11} {:?} {:.2}s", st.name, st.status, st.seconds);
    }
    let mut last = "";
    for (stage, line) in &s.highlights {
        if stage != last {
            println!("{stage}:");
            last = stage;
        }
        println!("  {line}");
    }
    if let Some(f) = &s.failed {
        print!("run failed:\n{f}");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

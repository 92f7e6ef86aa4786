use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use secest::harness::{self, ExperimentConfig, SystemSource};
use secest::{Error, Result};
use serde::Serialize;

/// Secure state estimation under sparse sensor attacks.
#[derive(Parser, Debug)]
#[command(name = "secest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Preset name (pendulum, pendulum-raw, scalar-undetectable, scalar-marginal) or a JSON config path.
    config: String,
    /// Base seed; seed s of a multi-seed run uses base + s.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Simulation horizon.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Design-phase report: spectra, coverage sets, sparse indices, H patterns, conditioning.
    Analyze(Common),
    /// Run the three estimators on simulated trajectories.
    Simulate(Common),
    /// MSE with and without attack across regularization weights.
    SweepGamma {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
    },
    /// MSE across uniform attack magnitudes.
    SweepAttack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        mags: Vec<f64>,
    },
    /// Two plants with identical outputs and diverging states.
    UndetectableDemo(Common),
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = Path::new(&common.config);
    let mut cfg = if path.is_file() {
        ExperimentConfig::load(path)?
    } else if harness::preset(&common.config).is_ok() {
        ExperimentConfig { system: SystemSource::Preset(common.config.clone()), ..Default::default() }
    } else {
        return Err(Error::Config(format!("'{}' is neither a preset nor a readable config file", common.config)));
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = common.seeds {
        cfg.seeds = n;
    }
    if let Some(n) = common.steps {
        cfg.steps = n;
        cfg.undetectable.steps = n;
    }
    if let Some(dir) = &common.out {
        cfg.out = Some(dir.clone());
    }
    cfg.check()?;
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        // a closed reader (e.g. `| head`) is not a failure of the run
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(common) => {
            let cfg = load_config(&common)?;
            let report = harness::analyze(&cfg.resolve()?, &cfg.tolerances)?;
            if let Some(dir) = &cfg.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("analysis.json"), serde_json::to_string_pretty(&report)?)?;
            }
            emit(&report)
        }
        Command::Simulate(common) => emit(&harness::run_experiment(&load_config(&common)?)?),
        Command::SweepGamma { common, gammas } => emit(&harness::sweep_gamma(&load_config(&common)?, &gammas)?),
        Command::SweepAttack { common, mags } => {
            emit(&harness::sweep_attack_magnitude(&load_config(&common)?, &mags)?)
        }
        Command::UndetectableDemo(common) => emit(&harness::undetectable_demo(&load_config(&common)?)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport { error: e.kind(), message: e.to_string() };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(2)
        }
    }
}

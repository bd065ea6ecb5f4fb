use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use cvar_mlmc::config::{ExperimentConfig, ExperimentKind};
use cvar_mlmc::error::Error;
use cvar_mlmc::exec::Execution;
use cvar_mlmc::experiments::Experiment;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Estimate,
    Reliability,
    Complexity,
    Optimize,
    Reference,
}

impl From<Command> for ExperimentKind {
    fn from(c: Command) -> Self {
        match c {
            Command::Estimate => ExperimentKind::Estimate,
            Command::Reliability => ExperimentKind::Reliability,
            Command::Complexity => ExperimentKind::Complexity,
            Command::Optimize => ExperimentKind::Optimize,
            Command::Reference => ExperimentKind::Reference,
        }
    }
}

/// CVaR estimation and minimisation with multilevel Monte Carlo.
///
/// Exit codes: 0 on success, 1 on a runtime failure (a JSON error record is
/// printed to stderr), 2 on an invalid config (the record names the field).
#[derive(Debug, Parser)]
#[command(name = "cvar-mlmc", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `experiment.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long)]
    threads: Option<usize>,
}

fn error_record(e: &Error) -> serde_json::Value {
    match e {
        Error::Config { path, message } => serde_json::json!({ "error": "config", "path": path, "message": message }),
        other => {
            let kind = match other {
                Error::Parameter(_) => "parameter",
                Error::Sample { .. } => "sample",
                Error::Diverged { .. } => "diverged",
                Error::InsufficientSamples(_) => "insufficient_samples",
                Error::Domain { .. } => "domain",
                Error::BiasUndefined => "bias_undefined",
                Error::BoundaryMinimiser { .. } => "boundary_minimiser",
                Error::NotConverged { .. } => "not_converged",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
                Error::Config { .. } => unreachable!(),
            };
            serde_json::json!({ "error": kind, "message": other.to_string() })
        }
    }
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, Error> {
    let mut config = ExperimentConfig::from_file(&cli.config)?;
    let kind = ExperimentKind::from(cli.command);
    if let Some(k) = config.experiment.kind {
        if k != kind {
            return Err(Error::Config {
                path: "experiment.kind".into(),
                message: format!("config is for {k:?} but the {kind:?} command was given"),
            });
        }
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli.out.clone().or_else(|| config.experiment.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let experiment = Experiment::new(&config, out, Execution::Parallel);
    match cli.threads {
        Some(0) => Err(Error::Config { path: "--threads".into(), message: "must be at least 1".into() }),
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Parameter(e.to_string()))?
            .install(|| experiment.run(kind)),
        _ => experiment.run(kind),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(if matches!(e, Error::Config { .. }) { 2 } else { 1 })
        }
    }
}

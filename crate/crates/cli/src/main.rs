//! Command-line front end: generate data, train, evaluate, verify
//! equivariance.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure (NaN),
//! 4 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Verification(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {}", m),
            CliError::Numeric(m) => write!(f, "numeric failure: {}", m),
            CliError::Verification(m) => write!(f, "verification failure: {}", m),
        }
    }
}

impl From<equidyn::tensor::TensorError> for CliError {
    fn from(e: equidyn::tensor::TensorError) -> Self {
        match e {
            equidyn::tensor::TensorError::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "equidyn",
    about = "Symmetry-equivariant convolutional forecasting for 2D dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Plain-text key=value run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for data generation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a heat-diffusion corpus and write EQDY trajectory files.
    Generate(Common),
    /// Train a forecaster and write a checkpoint plus per-epoch losses.
    Train(Common),
    /// Evaluate a checkpoint on (transformed) test sets; emit metrics CSV.
    Eval(Common),
    /// Measure a model's equivariance error against a tolerance.
    Verify(Common),
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set("seed", seed.to_string());
    }
    if let Some(out) = &common.out {
        cfg.set("out", out.display().to_string());
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(c) => commands::cmd_generate(&load_config(c)?, c.force, c.threads),
        Command::Train(c) => commands::cmd_train(&load_config(c)?, c.force),
        Command::Eval(c) => commands::cmd_eval(&load_config(c)?, c.force),
        Command::Verify(c) => commands::cmd_verify(&load_config(c)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e);
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Numeric(_) => ExitCode::from(3),
                CliError::Verification(_) => ExitCode::from(4),
            }
        }
    }
}

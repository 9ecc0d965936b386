//! `probmorph`: property checks, estimation, bound verification and MMD
//! between sample files.
//!
//! Exit codes: 0 success, 2 a checked law or bound failed, 64 usage or
//! configuration error, 65 bad input data.

mod commands;
mod config;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "probmorph",
    version,
    about = "Markov kernels and kernel mean embeddings on finite spaces"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config: `key = value` lines, `#` comments.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (required here or in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; without it the main document goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random instances (laws) or Monte Carlo trials (bounds).
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Sample sizes, comma-separated (bounds), or a sample cap (estimate).
    #[arg(long, global = true)]
    n: Option<String>,
    /// Regularization weight, or `auto` for n^{-1/2}.
    #[arg(long, global = true)]
    gamma: Option<String>,
    /// Kernel name, optionally with its parameter: `gaussian:0.5`.
    #[arg(long, global = true)]
    kernel: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the kernel-calculus laws on seeded random instances.
    Laws,
    /// Fit a W-regularized kernel to an `x,y` sample file.
    Estimate {
        /// CSV with header `x,y`.
        data: PathBuf,
    },
    /// Monte Carlo check of a concentration bound.
    Bounds {
        /// hoeffding, covering or mmd_concentration.
        bound: Option<String>,
    },
    /// MMD between the empirical measures of two sample files.
    Embed {
        /// CSV with header `y` or `x,y`.
        a: PathBuf,
        b: PathBuf,
    },
}

fn load_config(common: Common) -> CliResult<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(trials) = common.trials {
        if trials == 0 {
            return Err(CliError::Usage("--trials must be positive".into()));
        }
        config.set("trials", trials.to_string());
    }
    let overrides = [
        ("seed", common.seed.map(|s| s.to_string())),
        ("out", common.out.map(|p| p.display().to_string())),
        ("n", common.n),
        ("gamma", common.gamma),
        ("kernel", common.kernel),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            config.set(key, v);
        }
    }
    Ok(config)
}

fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(cli.common)?;
    match cli.command {
        Command::Laws => commands::laws(&config),
        Command::Estimate { data } => commands::estimate(&config, &data),
        Command::Bounds { bound } => commands::bounds(&config, bound.as_deref()),
        Command::Embed { a, b } => commands::embed(&config, &a, &b),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

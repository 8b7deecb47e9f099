//! `splitfed`: run split-federated simulations and noise/strategy sweeps.

mod check;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use splitfed::harness::{render_table, resolve_output_dir, run_grid, write_grid, write_run, GridSpec};
use splitfed::protocol::{run_simulation, RunConfig, Seeds};

#[derive(Parser)]
#[command(name = "splitfed", version, about = "Split-federated learning over noisy channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Run a grid from this file instead (same as `grid --config`).
        #[arg(long, value_name = "PATH", conflicts_with = "config")]
        grid: Option<PathBuf>,
    },
    /// Sweep noise levels and strategies.
    Grid {
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in reference checks.
    Check,
}

#[derive(Args)]
struct Common {
    /// JSON run config (for `grid`, a grid document or a run config).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides SPLITFED_OUT_DIR and the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

/// Bad input: reported and mapped to exit code 2 before anything is written.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn read_config(path: Option<&Path>) -> Result<String> {
    let path = path.ok_or_else(|| ConfigError(anyhow::anyhow!("--config is required")))?;
    fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(|e| ConfigError(e).into())
}

fn simulate(common: &Common) -> Result<()> {
    let text = read_config(common.config.as_deref())?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| ConfigError(e.into()))?;
    if let Some(s) = common.seed {
        cfg.seeds = Seeds::from_master(s);
    }
    let out = resolve_output_dir(common.out.as_deref(), &cfg);
    let result = run_simulation(&cfg)?;
    let summary = write_run(&out, &result)?;
    print!("{}", render_table(&summary));
    if let Some(reason) = &result.divergence_reason {
        println!("diverged: {reason}");
    }
    println!("results written to {}", out.display());
    Ok(())
}

fn grid(path: Option<&Path>, common: &Common) -> Result<()> {
    let text = read_config(path)?;
    let mut spec = GridSpec::from_json(&text).map_err(|e| ConfigError(e.into()))?;
    if let Some(s) = common.seed {
        spec.base.seeds = Seeds::from_master(s);
    }
    let out = resolve_output_dir(common.out.as_deref(), &spec.base);
    let results = run_grid(&spec)?;
    let summary = write_grid(&out, &spec, &results)?;
    print!("{}", render_table(&summary));
    println!("results written to {}", out.display());
    Ok(())
}

fn check() -> Result<bool> {
    let mut ok = true;
    for o in check::run_all() {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        ok &= o.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, grid: Some(g) } => grid(Some(g), common).map(|_| true),
        Command::Simulate { common, grid: None } => simulate(common).map(|_| true),
        Command::Grid { common } => grid(common.config.as_deref(), common).map(|_| true),
        Command::Check => check(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

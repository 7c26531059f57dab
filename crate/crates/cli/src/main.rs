//! Experiment driver: parse a JSON config, dispatch to a subcommand, and
//! write CSV/JSON artifacts plus a run manifest with content hashes.
//!
//! Exit status is 0 exactly when every asserted check passed (and, under
//! --strict, no warnings were raised).

mod artifacts;
mod commands;

use anyhow::Context;
use artifacts::{sha256_hex, ArtifactSet};
use clap::{Parser, Subcommand};
use manifold_bsde::config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "manifold-bsde", version, about = "BSDE-on-manifolds experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: MANIFOLD_BSDE_WORKERS or all cores).
    /// The results are identical for every worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Treat warnings as failures.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate the driving diffusion and export the ensembles.
    Simulate,
    /// Solve the backward equation and export solution plus metadata.
    Solve,
    /// Run the named inequality estimates.
    CheckEstimates,
    /// Calibrate the compensator and certify the submartingale property.
    Submartingale,
    /// Compare two solver initializations on the ball experiment.
    Uniqueness,
    /// Exhibit two distinct sphere martingales with one terminal value.
    NonuniquenessDemo,
    /// Solve the Dirichlet problem on the configured domain.
    Dirichlet,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Solve => "solve",
            Command::CheckEstimates => "check-estimates",
            Command::Submartingale => "submartingale",
            Command::Uniqueness => "uniqueness",
            Command::NonuniquenessDemo => "nonuniqueness-demo",
            Command::Dirichlet => "dirichlet",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let config_path = cli
        .config
        .clone()
        .context("--config PATH is required")?;
    let raw = std::fs::read(&config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let config_hash = sha256_hex(&raw);
    let text = String::from_utf8(raw).context("config is not UTF-8")?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    let workers = cli
        .workers
        .or_else(|| {
            std::env::var("MANIFOLD_BSDE_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(num_threads_default);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building the worker pool")?;

    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let art = ArtifactSet::new(&out_dir);

    let command = cli.command;
    let output = pool.install(|| -> anyhow::Result<commands::CommandOutput> {
        match command {
            Command::Simulate => commands::run_simulate(&cfg, art),
            Command::Solve => commands::run_solve(&cfg, art),
            Command::CheckEstimates => commands::run_check_estimates(&cfg, art),
            Command::Submartingale => commands::run_submartingale(&cfg, art),
            Command::Uniqueness => commands::run_uniqueness(&cfg, art),
            Command::NonuniquenessDemo => commands::run_nonuniqueness(&cfg, art),
            Command::Dirichlet => commands::run_dirichlet(&cfg, art),
        }
    })?;

    let manifest = output.artifacts.finalize(
        command.name(),
        &config_hash,
        cfg.seed,
        workers,
        output.checks,
        output.warnings,
    )?;
    for c in &manifest.checks {
        println!(
            "{}: {} ({} = {})",
            command.name(),
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value
        );
    }
    let strict_ok = !cli.strict || manifest.warnings.is_empty();
    if !strict_ok {
        for w in &manifest.warnings {
            eprintln!("warning (strict): {w}");
        }
    }
    Ok(manifest.pass && strict_ok)
}

fn num_threads_default() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

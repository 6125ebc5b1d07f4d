//! `pdc` — experiment driver for the delayed stochastic control toolkit.
//!
//! Subcommands: `solve`, `simulate`, `verify`, `dpp`, `game`, `ito-check`,
//! `converge`, and `plot`. Exit status: 0 when every report flag passed,
//! 1 on failed flags or numerical errors, 2 on usage/config errors.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{CrossPolicy, ExperimentConfig};
use run::RunContext;

#[derive(Parser)]
#[command(name = "pdc", version, about = "Delayed stochastic control pipelines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the backward coefficient system and persist the surfaces.
    Solve(RunArgs),
    /// Estimate the cost of one policy by Monte Carlo.
    Simulate(RunArgs),
    /// Feedback-versus-rivals cost comparison against the solved value.
    Verify(RunArgs),
    /// Nested dynamic-programming estimate at an intermediate time.
    Dpp(RunArgs),
    /// Solve the N-player system, run the Nash deviation check, and
    /// optionally the population ladder.
    Game(RunArgs),
    /// Change-of-variables residual refinement study.
    ItoCheck(RunArgs),
    /// HJB residual refinement ladder and cross-factor selection.
    Converge(RunArgs),
    /// Emit plot-ready CSV slices from persisted surfaces.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo batches (0 = library default).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the cross-factor policy.
    #[arg(long, value_enum)]
    cross_factor: Option<CrossArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CrossArg {
    Auto,
    Half,
    One,
}

impl From<CrossArg> for CrossPolicy {
    fn from(value: CrossArg) -> Self {
        match value {
            CrossArg::Auto => CrossPolicy::Auto,
            CrossArg::Half => CrossPolicy::Half,
            CrossArg::One => CrossPolicy::One,
        }
    }
}

#[derive(Args)]
struct PlotArgs {
    /// Directory holding persisted surfaces (`f0.csv..f3.csv`, `meta.json`).
    #[arg(long)]
    surfaces: PathBuf,
    /// One of `f0`, `f1`, `f2`, `f3`.
    #[arg(long)]
    slice: String,
    /// Fix the time of an `f1`/`f2` slice to one grid node.
    #[arg(long)]
    at_t: Option<f64>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

fn prepare(args: &RunArgs, mode: &str) -> Result<RunContext, pdc_core::Error> {
    let config = ExperimentConfig::load(&args.config)?;
    config.check_mode(mode)?;
    let output = args
        .output
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| {
            pdc_core::Error::InvalidParameter(
                "an output directory is required (--output or config key 'output_dir')".into(),
            )
        })?;
    std::fs::create_dir_all(&output)?;
    if let Some(n) = args.threads {
        pdc_core::configure_threads(n);
    }
    Ok(RunContext {
        config,
        output,
        seed_override: args.seed,
        cross_override: args.cross_factor.map(Into::into),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, result) = match &cli.cmd {
        Cmd::Solve(a) => ("solve", dispatch(a, "solve", run::solve)),
        Cmd::Simulate(a) => ("simulate", dispatch(a, "simulate", run::simulate)),
        Cmd::Verify(a) => ("verify", dispatch(a, "verify", run::verify)),
        Cmd::Dpp(a) => ("dpp", dispatch(a, "dpp", run::dpp)),
        Cmd::Game(a) => ("game", dispatch(a, "game", run::game)),
        Cmd::ItoCheck(a) => ("ito-check", dispatch(a, "ito-check", run::ito_check)),
        Cmd::Converge(a) => ("converge", dispatch(a, "converge", run::converge)),
        Cmd::Plot(a) => (
            "plot",
            run::plot(&a.surfaces, &a.slice, a.at_t, &a.out).map_err(Phase::Run),
        ),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{mode}: report flags failed");
            ExitCode::from(1)
        }
        Err(Phase::Config(e)) => {
            eprintln!("{mode}: configuration error: {e}");
            eprintln!("usage: pdc {mode} --config <file> [--output <dir>] [--seed <u64>] [--threads <n>] [--cross-factor <auto|half|one>]");
            ExitCode::from(2)
        }
        Err(Phase::Run(e)) => {
            eprintln!("{mode}: {e}");
            ExitCode::from(1)
        }
    }
}

enum Phase {
    Config(pdc_core::Error),
    Run(pdc_core::Error),
}

fn dispatch(
    args: &RunArgs,
    mode: &str,
    pipeline: fn(&RunContext) -> pdc_core::Result<bool>,
) -> Result<bool, Phase> {
    let ctx = prepare(args, mode).map_err(Phase::Config)?;
    pipeline(&ctx).map_err(Phase::Run)
}

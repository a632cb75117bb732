//! `hydra`: runs loss-curve, load-balance and data-path experiments from a
//! TOML config and writes `<scenario>_<hash>.csv`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hydra_core::analysis::{emit_report, run_experiment, Experiment, Scenario};

#[derive(Parser)]
#[command(name = "hydra", version, about = "Erasure-coded disaggregated memory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Data-loss probability curves (analytic and Monte Carlo).
    Loss(RunArgs),
    /// Load imbalance under each placement policy.
    Balance(RunArgs),
    /// Latency percentiles from a simulated workload with faults.
    Datapath(RunArgs),
    /// Parse and check a config without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the Monte Carlo trial count.
    #[arg(long)]
    trials: Option<u64>,
}

fn run(args: RunArgs, expected: Scenario) -> anyhow::Result<()> {
    let mut exp = Experiment::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if exp.config.scenario != expected {
        bail!("config scenario is `{}`, this command runs `{expected}`", exp.config.scenario);
    }
    if args.seed.is_some() || args.trials.is_some() {
        if let Some(seed) = args.seed {
            exp.config.seed = seed;
        }
        if let Some(trials) = args.trials {
            exp.config.trials = trials;
        }
        exp.rehash()?;
    }
    let out = args.out.unwrap_or_else(|| exp.config.output_dir.clone());
    let report = run_experiment(&exp)?;
    let path = emit_report(&report, &out)?;
    println!("{} rows -> {}", report.rows.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Loss(a) => run(a, Scenario::LossCurves),
        Command::Balance(a) => run(a, Scenario::LoadBalance),
        Command::Datapath(a) => run(a, Scenario::Datapath),
        Command::ValidateConfig { config } => Experiment::load(&config)
            .map(|exp| println!("ok: {} config {}", exp.config.scenario, exp.hash))
            .with_context(|| format!("validating {}", config.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

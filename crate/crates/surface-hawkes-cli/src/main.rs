//! Batch front end for the surface Hawkes toolkit.
//!
//! Subcommands: `simulate`, `noarb`, `scaling`, `backtest`, `impact`. Every
//! command reads one TOML experiment config, writes CSV files plus the
//! resolved config into the output directory, and is deterministic given
//! (config, seed) regardless of the thread count.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
//! 3 no-arbitrage violations found.

mod commands;
mod config;
mod csvout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{AppResult, ExperimentConfig};

/// Environment variable overriding the configured output directory
/// (the --out flag wins over both).
const OUT_DIR_ENV: &str = "SURFACE_HAWKES_OUT";

#[derive(Parser)]
#[command(name = "surface-hawkes", about = "Event-driven volatility surface toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the base seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Size of the worker pool for seed ensembles (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one event path and write events, surface and intensity CSVs.
    Simulate(RunArgs),
    /// Check the kernel/baseline against the no-arbitrage conditions.
    Noarb(RunArgs),
    /// Long-horizon rescaling, factor-limit paths and Hurst estimates.
    Scaling(RunArgs),
    /// Market-making backtest ensemble, mean PnL/inventory paths.
    Backtest(RunArgs),
    /// Market-impact and temporary cross-impact curves.
    Impact(RunArgs),
}

fn load(args: &RunArgs) -> AppResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.simulation.seed0 = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.display().to_string();
    } else if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output.dir = dir;
        }
    }
    Ok(cfg)
}

fn dispatch(command: &Command) -> AppResult<i32> {
    let (args, run): (&RunArgs, fn(&ExperimentConfig) -> AppResult<i32>) = match command {
        Command::Simulate(a) => (a, commands::cmd_simulate),
        Command::Noarb(a) => (a, commands::cmd_noarb),
        Command::Scaling(a) => (a, commands::cmd_scaling),
        Command::Backtest(a) => (a, commands::cmd_backtest),
        Command::Impact(a) => (a, commands::cmd_impact),
    };
    let cfg = load(args)?;
    match args.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| config::AppError::Runtime(format!("thread pool: {e}")))?;
            pool.install(|| run(&cfg))
        }
        None => run(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `msfair`: simulate, transform, fit, price and fairness-adjust
//! multi-state insurance studies from a key-value config.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Context;
use config::RunConfig;
use error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "msfair", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Synthetic trajectories and policies.
    Simulate,
    /// Trajectories to per-age exposure rows.
    Transform,
    /// Poisson GLM per transition: model card, coefficients, contributions.
    Fit,
    /// Quotes per pricing mode and premium-by-age plot data.
    Price,
    /// Fairness report for post-, pre- or in-processing.
    Fair,
    /// Transition probabilities and state occupancy for one policy.
    Report,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("", std::path::Path::new("."))?,
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(n) = cli.threads.or(cfg.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| error::config(format!("threads: {e}")))?;
    }
    // simulate writes the files the other commands read
    if !matches!(cli.command, Command::Simulate) {
        cfg.check_inputs()?;
    }
    std::fs::create_dir_all(&cli.out)?;
    let ctx = Context { cfg, out: cli.out };
    match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Transform => commands::transform(&ctx),
        Command::Fit => commands::fit_cmd(&ctx),
        Command::Price => commands::price(&ctx),
        Command::Fair => commands::fair(&ctx),
        Command::Report => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msfair: error: {e}");
            let code: CliError = e;
            ExitCode::from(code.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::{FlagOverrides, RunConfig};
use error::CliError;

/// Robustness and attribution evaluation for triplet classifiers.
#[derive(Parser, Debug)]
#[command(name = "ivtrust", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (`out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (`workers`); 1 runs sequentially.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Test fold (`fold`).
    #[arg(long, global = true)]
    fold: Option<usize>,

    /// Override any key: `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the synthetic dataset as a frames directory.
    Synth,
    /// Train the reference model.
    Train,
    /// Per-component AP on the test fold.
    Eval,
    /// Attribution overlays and the core/spurious mass table.
    Explain,
    /// Minimum-norm attacks on relevant, irrelevant and full masks.
    Attack,
    /// Robustness against fraction of attacked features.
    Curve,
    /// Metrics, top-k tables, mass table and figures.
    Report,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let flags = FlagOverrides { seed: cli.seed, out: cli.out, workers: cli.workers, fold: cli.fold, sets: cli.sets };
    let cfg = RunConfig::load(cli.config.as_deref(), std::env::vars(), &flags)?;
    let cmd = cli.command;
    ivtrust::par::with_workers(cfg.workers, || match cmd {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Explain => commands::explain(&cfg),
        Command::Attack => commands::attack(&cfg),
        Command::Curve => commands::curve(&cfg),
        Command::Report => commands::report(&cfg),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code as u8)
        }
    }
}

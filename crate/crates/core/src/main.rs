use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssa_tta::cli::{inspect_model, run_experiment};
use ssa_tta::config::load_config;
use ssa_tta::Error;

/// Significant-subspace alignment experiments for regression TTA.
#[derive(Parser)]
#[command(name = "ssa-tta", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a config-driven experiment and write report artifacts.
    Run {
        /// TOML experiment config
        config: PathBuf,
        /// Comma-separated seeds; methods repeat per seed (mean ± std in the summary)
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Dotted-path overrides, e.g. --set train.lr=0.01 (flags win over the file)
        #[arg(long = "set")]
        set: Vec<String>,
        /// Validate the config and print the resolved plan without running
        #[arg(long)]
        dry_run: bool,
    },
    /// Print subspace diagnostics for a checkpoint against a CSV dataset.
    Inspect {
        checkpoint: PathBuf,
        dataset: PathBuf,
    },
}

fn run() -> Result<i32, Error> {
    let args = Args::parse();
    match args.command {
        Command::Run { config, seeds, set, dry_run } => {
            let cfg = load_config(&config, &set)?;
            let summary = run_experiment(&cfg, &seeds, dry_run)?;
            Ok(if summary.any_diverged { 2 } else { 0 })
        }
        Command::Inspect { checkpoint, dataset } => {
            inspect_model(&checkpoint, &dataset)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lamkit::cli;

#[derive(Parser)]
#[command(
    name = "lamkit",
    about = "Length-aware multi-kernel transformer for long document classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full model and write checkpoint, history and config snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config (and LAMKIT_SEED) training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Allow writing into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the configured corpus's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also report per length-quarter rows (Q1..Q4).
        #[arg(long)]
        quarters: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train all configured ablation variants over all seeds and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of full,wo_mk,wo_lav,wo_both.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        force: bool,
    },
    /// Print per-split length quantiles, mean length, size and label count.
    Stats {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match args.command {
        Command::Train {
            config,
            out,
            seed,
            force,
        } => cli::cmd_train(&config, &out, seed, force),
        Command::Eval {
            checkpoint,
            config,
            out,
            quarters,
            force,
        } => cli::cmd_eval(&checkpoint, &config, &out, quarters, force),
        Command::Ablate {
            config,
            out,
            variants,
            seeds,
            force,
        } => cli::cmd_ablate(&config, &out, variants, seeds, force),
        Command::Stats { config } => cli::cmd_stats(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

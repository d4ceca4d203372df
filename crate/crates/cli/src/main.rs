//! `vqrl` command-line driver.
//!
//! Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "vqrl", version, about = "Reward-driven video quality training on a synthetic benchmark")]
pub struct Cli {
    /// TOML stage plan; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the plan seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark, decoder and hidden oracle.
    GenData,
    /// Image-score warm-up.
    Stage1 {
        /// Dataset directory (defaults to the plan's data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Task-mix training with the temporal and length rewards.
    Stage2 {
        /// Policy checkpoint to start from.
        #[arg(long)]
        init: PathBuf,
        /// Dataset directory (defaults to the plan's data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Alternating judge and generator finetuning.
    Stage3 {
        /// Judge policy checkpoint.
        #[arg(long)]
        judge: PathBuf,
        /// Generator checkpoint; a fresh generator when omitted.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Dataset directory (defaults to the plan's data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Oracle file, used only to log win-rates.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Score a policy on a dataset.
    Eval {
        /// Policy checkpoint; a freshly initialized policy when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Line-delimited dataset file.
        #[arg(long)]
        dataset: PathBuf,
        /// Calibration pairs for the tie threshold.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Compare against oracle quality instead of annotations.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Finite-difference checks of the GRPO and DPO gradients.
    Gradcheck {
        /// Random cases per check.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Per-epoch summary of training logs.
    Report {
        /// Training log files (jsonl).
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! The `pmts` command line: dataset preparation, proxy pre-training,
//! fine-tuning, evaluation, ablation and stability sweeps, the variance-law
//! check, and report aggregation.
//!
//! Every command accepts `--config <file.json>` whose keys mirror its flags;
//! flags win over file keys, unknown keys are rejected, and the resolved
//! configuration is written next to the outputs.

pub mod cmd;
pub mod config;
pub mod error;

use clap::{Parser, Subcommand};

pub use error::{exit, CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "pmts", version, about = "Few-shot RUL fine-tuning of a frozen univariate backbone")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Window, label, subsample and normalize a run-to-failure dataset.
    Prepare(cmd::prepare::PrepareArgs),
    /// Pre-train a backbone by masked reconstruction on univariate windows.
    PretrainProxy(cmd::pretrain::PretrainArgs),
    /// Fine-tune one model and write its checkpoint, trace and metrics.
    Finetune(cmd::finetune::FinetuneArgs),
    /// Score a saved model on a prepared split.
    Evaluate(cmd::evaluate::EvaluateArgs),
    /// Run the component ablation grid over several seeds.
    Ablate(cmd::ablate::AblateArgs),
    /// Compare zero and He-normal heads across seeds and arms.
    Stability(cmd::stability::StabilityArgs),
    /// Monte-Carlo check of the head-gradient variance law.
    VarianceCheck(cmd::variance::VarianceArgs),
    /// Aggregate metrics files or traces into mean ± std tables.
    Report(cmd::report::ReportArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(a) => cmd::prepare::run(a),
        Command::PretrainProxy(a) => cmd::pretrain::run(a),
        Command::Finetune(a) => cmd::finetune::run(a),
        Command::Evaluate(a) => cmd::evaluate::run(a),
        Command::Ablate(a) => cmd::ablate::run(a),
        Command::Stability(a) => cmd::stability::run(a),
        Command::VarianceCheck(a) => cmd::variance::run(a),
        Command::Report(a) => cmd::report::run(a),
    }
}

use std::path::PathBuf;

use clap::{Args, ValueEnum};

use pmts_core::train::evaluate;

use super::common::{self, RunMetrics};
use crate::config;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model checkpoint written by `finetune`.
    #[arg(long)]
    pub model: PathBuf,
    /// Prepared dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Metrics JSON destination; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let ds = common::load_data(args.data.as_deref())?;
    let (model, meta) = common::load_model(&args.model)?;
    let (set, split) = match args.split {
        Split::Train => (&ds.train, "train"),
        Split::Test => (&ds.test, "test"),
    };
    let report = RunMetrics {
        label: meta.label,
        seed: meta.seed,
        split: split.into(),
        metrics: evaluate(&model, set)?,
    };
    match &args.out {
        Some(path) => config::write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("metrics serialize")),
    }
    Ok(())
}

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pmts_core::backbone::BackboneSpec;
use pmts_core::data::PreparedDataset;
use pmts_core::peft::ModelConfig;
use pmts_core::train::{pretrain_proxy, window_pool, PretrainConfig, PretrainReport};

use crate::config::{self, set, Arch};
use crate::error::{CliError, Result};

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Prepared source corpus; every channel of every training window
    /// becomes one univariate sample.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output backbone checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of each window hidden by the contiguous mask.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRun {
    pub data: Option<PathBuf>,
    pub arch: Option<Arch>,
    pub model: Option<ModelConfig>,
    pub seed: Option<u64>,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneMeta {
    pub backbone: BackboneSpec,
    pub windows: usize,
    pub report: PretrainReport,
}

impl PretrainRun {
    pub fn resolve(args: &PretrainArgs) -> Result<Self> {
        let mut run: PretrainRun = config::load(args.config.as_deref())?;
        set(&mut run.data, args.data.clone().map(Some));
        run.model = Some(config::resolve_model(args.arch, run.arch.take(), run.model.take())?);
        let p = &mut run.pretrain;
        set(&mut p.epochs, args.epochs);
        set(&mut p.lr, args.lr);
        set(&mut p.batch_size, args.batch_size);
        set(&mut p.mask_ratio, args.mask_ratio);
        let seed = config::resolve_seed(args.seed, run.seed)?;
        run.seed = Some(seed);
        run.pretrain.seed = seed;
        if run.data.is_none() {
            return Err(CliError::usage("--data is required"));
        }
        Ok(run)
    }
}

pub fn run(args: &PretrainArgs) -> Result<()> {
    let run = PretrainRun::resolve(args)?;
    let ds = PreparedDataset::load(run.data.as_deref().expect("resolved"))?;
    let pool = window_pool(&ds.train);
    let spec = &run.model.as_ref().expect("resolved").backbone;
    log::info!("pre-training on {} univariate windows", pool.len());
    let (state, report) = pretrain_proxy(spec, &pool, &run.pretrain)?;
    state.save_weights(&args.out)?;
    let meta = BackboneMeta {
        backbone: spec.clone(),
        windows: pool.len(),
        report,
    };
    config::write_json(&args.out.with_extension("json"), &meta)?;
    config::write_json(&args.out.with_extension("config.json"), &run)?;
    let losses = &meta.report.epoch_loss;
    println!(
        "pre-trained on {} windows: loss {:.6} -> {:.6}",
        meta.windows,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

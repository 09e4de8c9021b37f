use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use pmts_core::peft::{ModelConfig, PeftModel, VariantFlags};
use pmts_core::train::{evaluate, finetune, mean_std, MetricsReport, TrainConfig};
use pmts_core::Rng;

use super::common::{self, TrainFlags};
use crate::config::{self, set, Arch};
use crate::error::{CliError, Result};

/// The eight on/off combinations, full model first and all-off last.
pub fn ablation_grid() -> Vec<VariantFlags> {
    let v = |pretrain, meta_variable, zero_init| VariantFlags {
        pretrain,
        meta_variable,
        zero_init,
    };
    vec![
        v(true, true, true),
        v(true, true, false),
        v(true, false, true),
        v(false, true, true),
        v(true, false, false),
        v(false, true, false),
        v(false, false, true),
        v(false, false, false),
    ]
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Prepared dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pre-trained backbone for the variants that use one.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated model seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateRun {
    pub data: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub arch: Option<Arch>,
    pub model: Option<ModelConfig>,
    pub variants: Vec<VariantFlags>,
    pub seeds: Vec<u64>,
    /// Shared by every run; its seed fixes the data order only.
    pub train: TrainConfig,
}

impl Default for AblateRun {
    fn default() -> Self {
        Self {
            data: None,
            backbone: None,
            arch: None,
            model: None,
            variants: ablation_grid(),
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
        }
    }
}

impl AblateRun {
    pub fn resolve(args: &AblateArgs) -> Result<Self> {
        let mut run: AblateRun = config::load(args.config.as_deref())?;
        set(&mut run.data, args.data.clone().map(Some));
        set(&mut run.backbone, args.backbone.clone().map(Some));
        set(&mut run.seeds, args.seeds.clone());
        run.model = Some(config::resolve_model(args.arch, run.arch.take(), run.model.take())?);
        args.train.apply(&mut run.train)?;
        if run.data.is_none() {
            return Err(CliError::usage("--data is required"));
        }
        if run.seeds.is_empty() || run.variants.is_empty() {
            return Err(CliError::usage("need at least one seed and one variant"));
        }
        if run.variants.iter().any(|v| v.pretrain) && common::is_random(run.backbone.as_deref()) {
            return Err(CliError::usage("pre-trained variants need --backbone <ckpt>"));
        }
        Ok(run)
    }
}

#[derive(Debug, Serialize)]
struct RunRow<'a> {
    label: &'a str,
    pretrain: bool,
    meta_variable: bool,
    zero_init: bool,
    seed: u64,
    mae: f64,
    rmse: f64,
    mape: Option<f64>,
    smape: f64,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    label: String,
    pretrain: bool,
    meta_variable: bool,
    zero_init: bool,
    runs: usize,
    mae_mean: f64,
    mae_std: f64,
    rmse_mean: f64,
    rmse_std: f64,
    smape_mean: f64,
    smape_std: f64,
}

pub fn run(args: &AblateArgs) -> Result<()> {
    let run = AblateRun::resolve(args)?;
    let ds = common::load_data(run.data.as_deref())?;
    let base = run.model.as_ref().expect("resolved");
    let bb = common::load_backbone(run.backbone.as_deref(), base)?;
    let jobs: Vec<(VariantFlags, u64)> = run
        .variants
        .iter()
        .flat_map(|&v| run.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<MetricsReport> = jobs
        .par_iter()
        .map(|&(flags, seed)| -> Result<MetricsReport> {
            let mut model = PeftModel::build_variant(
                base,
                flags,
                bb.as_ref(),
                ds.train.n_vars,
                ds.train.seq_len,
                &mut Rng::new(seed),
            )?;
            let label = common::variant_label(flags);
            finetune(&mut model, &ds.train, None, &run.train, &label, seed)?;
            Ok(evaluate(&model, &ds.test)?)
        })
        .collect::<Result<_>>()?;

    common::create_dir(&args.out)?;
    let mut w = csv::Writer::from_writer(common::create_file(&args.out.join("runs.csv"))?);
    for (&(flags, seed), m) in jobs.iter().zip(&results) {
        w.serialize(RunRow {
            label: &common::variant_label(flags),
            pretrain: flags.pretrain,
            meta_variable: flags.meta_variable,
            zero_init: flags.zero_init,
            seed,
            mae: m.mae,
            rmse: m.rmse,
            mape: m.mape,
            smape: m.smape,
        })?;
    }
    w.flush().map_err(|e| CliError::io(args.out.join("runs.csv"), e))?;

    let mut w = csv::Writer::from_writer(common::create_file(&args.out.join("ablation.csv"))?);
    for &flags in &run.variants {
        let group: Vec<&MetricsReport> = jobs
            .iter()
            .zip(&results)
            .filter(|((f, _), _)| *f == flags)
            .map(|(_, m)| m)
            .collect();
        let stat = |f: fn(&MetricsReport) -> f64| mean_std(&group.iter().map(|m| f(m)).collect::<Vec<_>>());
        let (mae_mean, mae_std) = stat(|m| m.mae);
        let (rmse_mean, rmse_std) = stat(|m| m.rmse);
        let (smape_mean, smape_std) = stat(|m| m.smape);
        let label = common::variant_label(flags);
        println!("{label:<24} MAE {mae_mean:.4} ± {mae_std:.4}  RMSE {rmse_mean:.4} ± {rmse_std:.4}");
        w.serialize(SummaryRow {
            label,
            pretrain: flags.pretrain,
            meta_variable: flags.meta_variable,
            zero_init: flags.zero_init,
            runs: group.len(),
            mae_mean,
            mae_std,
            rmse_mean,
            rmse_std,
            smape_mean,
            smape_std,
        })?;
    }
    w.flush().map_err(|e| CliError::io(args.out.join("ablation.csv"), e))?;
    config::write_json(&args.out.join("config.json"), &run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_every_combination_once() {
        let g = ablation_grid();
        assert_eq!(g.len(), 8);
        for (i, a) in g.iter().enumerate() {
            assert!(g[i + 1..].iter().all(|b| a != b));
        }
        assert_eq!(g[0], VariantFlags::default());
    }
}

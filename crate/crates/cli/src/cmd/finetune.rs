use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pmts_core::peft::{HeadInit, ModelConfig, PeftModel, VariantFlags};
use pmts_core::train::{evaluate, finetune, probe_subset, write_trace_csv, Arm, TrainConfig};
use pmts_core::Rng;

use super::common::{self, ModelMeta, RunMetrics, TrainFlags};
use crate::config::{self, set, Arch};
use crate::error::{CliError, Result};

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Prepared dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pre-trained backbone checkpoint, or `random`.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Use a randomly initialized backbone.
    #[arg(long)]
    pub no_pretrain: bool,
    /// Average the per-variable features instead of fusing them through
    /// the meta-variable.
    #[arg(long)]
    pub no_meta: bool,
    /// He-normal, bias-free regressor instead of the zero head.
    #[arg(long)]
    pub no_zero_init: bool,
    /// Train one of the comparison set-ups instead of an ablation variant.
    #[arg(long, value_enum, conflicts_with_all = ["no_pretrain", "no_meta"])]
    pub arm: Option<ArmArg>,
    /// Evaluate on the test split and write `metrics.json`.
    #[arg(long)]
    pub test: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ArmArg {
    Peft,
    Full,
    Scratch,
    LinearProbe,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Peft => Arm::Peft,
            ArmArg::Full => Arm::Full,
            ArmArg::Scratch => Arm::Scratch,
            ArmArg::LinearProbe => Arm::LinearProbe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneRun {
    pub data: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub arch: Option<Arch>,
    pub model: Option<ModelConfig>,
    pub variant: VariantFlags,
    pub arm: Option<Arm>,
    pub seed: Option<u64>,
    /// Its `seed` is replaced by the run seed.
    pub train: TrainConfig,
    /// Test samples whose feature norms are traced each epoch.
    pub probe_size: usize,
    pub test: bool,
}

impl Default for FinetuneRun {
    fn default() -> Self {
        Self {
            data: None,
            backbone: None,
            arch: None,
            model: None,
            variant: VariantFlags::default(),
            arm: None,
            seed: None,
            train: TrainConfig::default(),
            probe_size: 32,
            test: false,
        }
    }
}

impl FinetuneRun {
    pub fn resolve(args: &FinetuneArgs) -> Result<Self> {
        let mut run: FinetuneRun = config::load(args.config.as_deref())?;
        set(&mut run.data, args.data.clone().map(Some));
        set(&mut run.backbone, args.backbone.clone().map(Some));
        run.model = Some(config::resolve_model(args.arch, run.arch.take(), run.model.take())?);
        if args.no_pretrain {
            run.variant.pretrain = false;
        }
        if args.no_meta {
            run.variant.meta_variable = false;
        }
        if args.no_zero_init {
            run.variant.zero_init = false;
        }
        set(&mut run.arm, args.arm.map(|a| Some(a.into())));
        run.test |= args.test;
        args.train.apply(&mut run.train)?;
        let seed = config::resolve_seed(args.seed, run.seed)?;
        run.seed = Some(seed);
        run.train.seed = seed;

        if run.data.is_none() {
            return Err(CliError::usage("--data is required"));
        }
        let wants_backbone = match run.arm {
            Some(arm) => arm.pretrained(),
            None => run.variant.pretrain,
        };
        if wants_backbone && common::is_random(run.backbone.as_deref()) {
            return Err(CliError::usage(
                "a pre-trained backbone checkpoint is required (pass --backbone <ckpt>, or --no-pretrain)",
            ));
        }
        if !wants_backbone {
            run.backbone = None;
        }
        Ok(run)
    }

    pub fn label(&self) -> String {
        match self.arm {
            Some(arm) => format!("{}/{}", arm.name(), if self.variant.zero_init { "zero" } else { "kaiming" }),
            None => common::variant_label(self.variant),
        }
    }

    pub fn build(&self, n_vars: usize, seq_len: usize) -> Result<PeftModel> {
        let base = self.model.as_ref().expect("resolved");
        let bb = common::load_backbone(self.backbone.as_deref(), base)?;
        let seed = self.seed.expect("resolved");
        let model = match self.arm {
            Some(arm) => {
                let head = if self.variant.zero_init { HeadInit::Zero } else { HeadInit::Kaiming };
                arm.build(base, head, bb.as_ref(), n_vars, seq_len, seed)?
            }
            None => PeftModel::build_variant(base, self.variant, bb.as_ref(), n_vars, seq_len, &mut Rng::new(seed))?,
        };
        Ok(model)
    }
}

pub fn run(args: &FinetuneArgs) -> Result<()> {
    let run = FinetuneRun::resolve(args)?;
    let ds = common::load_data(run.data.as_deref())?;
    let seed = run.seed.expect("resolved");
    let mut model = run.build(ds.train.n_vars, ds.train.seq_len)?;
    let probe = (!ds.test.is_empty()).then(|| probe_subset(&ds.test, run.probe_size, seed));
    let label = run.label();
    let count = model.count_params();
    log::info!(
        "{label}: {} trainable parameters over {} training windows",
        count.trainable,
        ds.train.len()
    );
    let trace = finetune(&mut model, &ds.train, probe.as_ref(), &run.train, &label, seed)?;

    common::create_dir(&args.out)?;
    let meta = ModelMeta {
        label: label.clone(),
        seed,
        n_vars: ds.train.n_vars,
        seq_len: ds.train.seq_len,
        model: model.config().clone(),
    };
    common::save_model(&args.out.join("model.pmts"), &model, &meta)?;
    write_trace_csv(common::create_file(&args.out.join("trace.csv"))?, &[trace.clone()])?;
    config::write_json(&args.out.join("config.json"), &run)?;
    if run.test {
        let metrics = evaluate(&model, &ds.test)?;
        println!(
            "{label} seed {seed}: MAE {:.4} RMSE {:.4} SMAPE {:.3}%",
            metrics.mae, metrics.rmse, metrics.smape
        );
        let report = RunMetrics {
            label,
            seed,
            split: "test".into(),
            metrics,
        };
        config::write_json(&args.out.join("metrics.json"), &report)?;
    } else {
        println!(
            "{label} seed {seed}: final training loss {:.6}",
            trace.final_loss().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use pmts_core::peft::{HeadInit, ModelConfig};
use pmts_core::train::{probe_subset, stability_experiment, write_trace_csv, StabilityConfig, StabilitySummary};

use super::common::{self, TrainFlags};
use super::finetune::ArmArg;
use crate::config::{self, set, Arch};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum HeadArg {
    Zero,
    Kaiming,
}

impl From<HeadArg> for HeadInit {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Zero => HeadInit::Zero,
            HeadArg::Kaiming => HeadInit::Kaiming,
        }
    }
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    /// Prepared dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated model seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub arms: Option<Vec<ArmArg>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub heads: Option<Vec<HeadArg>>,
    /// Epoch whose cross-seed loss spread is compared.
    #[arg(long)]
    pub summary_epoch: Option<usize>,
    /// Give every seed its own data order as well as its own initialization.
    #[arg(long)]
    pub per_seed_order: bool,
    /// Keep at most this many training windows.
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub probe_size: Option<usize>,
    /// Seeds the data order and the train/probe subsets.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityRun {
    pub data: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub arch: Option<Arch>,
    pub model: Option<ModelConfig>,
    pub seed: Option<u64>,
    pub train_size: Option<usize>,
    pub probe_size: usize,
    pub stability: StabilityConfig,
}

impl Default for StabilityRun {
    fn default() -> Self {
        Self {
            data: None,
            backbone: None,
            arch: None,
            model: None,
            seed: None,
            train_size: None,
            probe_size: 32,
            stability: StabilityConfig::default(),
        }
    }
}

impl StabilityRun {
    pub fn resolve(args: &StabilityArgs) -> Result<Self> {
        let mut run: StabilityRun = config::load(args.config.as_deref())?;
        set(&mut run.data, args.data.clone().map(Some));
        set(&mut run.backbone, args.backbone.clone().map(Some));
        set(&mut run.train_size, args.train_size.map(Some));
        set(&mut run.probe_size, args.probe_size);
        run.model = Some(config::resolve_model(args.arch, run.arch.take(), run.model.take())?);
        let st = &mut run.stability;
        set(&mut st.seeds, args.seeds.clone());
        set(&mut st.arms, args.arms.as_ref().map(|a| a.iter().map(|&x| x.into()).collect()));
        set(&mut st.heads, args.heads.as_ref().map(|h| h.iter().map(|&x| x.into()).collect()));
        set(&mut st.summary_epoch, args.summary_epoch);
        st.per_seed_order |= args.per_seed_order;
        args.train.apply(&mut st.train)?;
        let seed = config::resolve_seed(args.seed, run.seed)?;
        run.seed = Some(seed);
        run.stability.train.seed = seed;
        if run.data.is_none() {
            return Err(CliError::usage("--data is required"));
        }
        if run.stability.arms.iter().any(|a| a.pretrained()) && common::is_random(run.backbone.as_deref()) {
            return Err(CliError::usage("pre-trained arms need --backbone <ckpt>"));
        }
        Ok(run)
    }
}

#[derive(Serialize)]
struct PlotRow<'a> {
    label: &'a str,
    epoch: usize,
    loss_mean: f64,
    loss_std: f64,
    sigma_mean: f64,
    sigma_std: f64,
}

pub fn write_plot_csv<W: std::io::Write>(out: W, summary: &StabilitySummary) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for arm in &summary.arms {
        for p in &arm.curve {
            w.serialize(PlotRow {
                label: &arm.label,
                epoch: p.epoch,
                loss_mean: p.loss_mean,
                loss_std: p.loss_std,
                sigma_mean: p.sigma_mean,
                sigma_std: p.sigma_std,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &StabilityArgs) -> Result<()> {
    let run = StabilityRun::resolve(args)?;
    let ds = common::load_data(run.data.as_deref())?;
    let seed = run.seed.expect("resolved");
    let base = run.model.as_ref().expect("resolved");
    let bb = common::load_backbone(run.backbone.as_deref(), base)?;
    let train = match run.train_size {
        Some(k) => probe_subset(&ds.train, k, seed),
        None => ds.train.clone(),
    };
    if ds.test.is_empty() {
        return Err(CliError::Data("the test split is empty; no probe samples to trace".into()));
    }
    let probe = probe_subset(&ds.test, run.probe_size, seed);
    let result = stability_experiment(base, bb.as_ref(), &train, &probe, &run.stability)?;

    common::create_dir(&args.out)?;
    write_trace_csv(common::create_file(&args.out.join("traces.csv"))?, &result.traces)?;
    write_plot_csv(common::create_file(&args.out.join("plot.csv"))?, &result.summary)?;
    config::write_json(&args.out.join("summary.json"), &result.summary)?;
    config::write_json(&args.out.join("config.json"), &run)?;
    for c in &result.summary.comparisons {
        println!(
            "{:<13} epoch {} loss std: zero {:.3e}  kaiming {:.3e}  {}",
            c.arm.name(),
            result.summary.summary_epoch,
            c.zero_std,
            c.kaiming_std,
            if c.zero_is_steadier { "zero head steadier" } else { "kaiming head steadier" }
        );
    }
    Ok(())
}

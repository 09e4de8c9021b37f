//! Pieces shared by the training commands.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use pmts_core::backbone::BackboneState;
use pmts_core::data::PreparedDataset;
use pmts_core::peft::{ModelConfig, PeftModel, VariantFlags};
use pmts_core::train::{MetricsReport, TrainConfig};
use pmts_core::Rng;

use crate::config::set;
use crate::error::{CliError, Result};

/// Recipe overrides accepted by every training command.
#[derive(Debug, Default, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Per-epoch learning-rate decay.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl TrainFlags {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.gamma, self.gamma);
        set(&mut cfg.batch_size, self.batch_size);
        cfg.validate().map_err(Into::into)
    }
}

/// What is needed to rebuild a saved model before loading its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub label: String,
    pub seed: u64,
    pub n_vars: usize,
    pub seq_len: usize,
    pub model: ModelConfig,
}

pub fn meta_path(model: &Path) -> PathBuf {
    model.with_extension("json")
}

pub fn save_model(path: &Path, model: &PeftModel, meta: &ModelMeta) -> Result<()> {
    model.save(path)?;
    crate::config::write_json(&meta_path(path), meta)
}

pub fn load_model(path: &Path) -> Result<(PeftModel, ModelMeta)> {
    let meta: ModelMeta = crate::config::read_json(&meta_path(path))?;
    let mut model = PeftModel::build(&meta.model, None, meta.n_vars, meta.seq_len, &mut Rng::new(0))?;
    model.load(path)?;
    Ok((model, meta))
}

/// Evaluation output, one file per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub label: String,
    pub seed: u64,
    pub split: String,
    pub metrics: MetricsReport,
}

pub fn load_data(path: Option<&Path>) -> Result<PreparedDataset> {
    let path = path.ok_or_else(|| CliError::usage("--data is required"))?;
    Ok(PreparedDataset::load(path)?)
}

/// `random` (or no path) means no pre-trained weights.
pub fn is_random(path: Option<&Path>) -> bool {
    path.is_none_or(|p| p.as_os_str() == "random")
}

pub fn load_backbone(path: Option<&Path>, model: &ModelConfig) -> Result<Option<BackboneState>> {
    match path {
        Some(p) if !is_random(Some(p)) => Ok(Some(BackboneState::load_weights(&model.backbone, p)?)),
        _ => Ok(None),
    }
}

pub fn variant_label(f: VariantFlags) -> String {
    format!(
        "{}+{}+{}",
        if f.pretrain { "pretrain" } else { "random" },
        if f.meta_variable { "meta" } else { "mean" },
        if f.zero_init { "zero" } else { "kaiming" }
    )
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn create_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| CliError::io(path, e))
}

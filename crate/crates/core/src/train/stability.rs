//! Multi-seed, multi-arm fine-tuning runs and the stability summary built
//! from their traces.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::finetune::{finetune, StabilityTrace, TrainConfig};
use crate::backbone::BackboneState;
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::peft::{HeadInit, ModelConfig, PeftModel};
use crate::rng::Rng;

/// How the backbone and the tuned parameters are set up for one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Pre-trained frozen backbone with adapters and meta-variable fusion.
    Peft,
    /// Pre-trained backbone, every weight trainable, averaged features.
    Full,
    /// Random backbone, every weight trainable, averaged features.
    Scratch,
    /// Pre-trained frozen backbone, only the head trains.
    LinearProbe,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Peft => "peft",
            Arm::Full => "full",
            Arm::Scratch => "scratch",
            Arm::LinearProbe => "linear_probe",
        }
    }

    pub fn pretrained(self) -> bool {
        !matches!(self, Arm::Scratch)
    }

    pub fn config(self, base: &ModelConfig, head: HeadInit) -> ModelConfig {
        let cfg = match self {
            Arm::Peft => ModelConfig {
                adapters: true,
                meta_variable: true,
                freeze_backbone: true,
                ..base.clone()
            },
            Arm::Full | Arm::Scratch => base.clone().full_finetune(),
            Arm::LinearProbe => base.clone().linear_probe(),
        };
        cfg.with_head(head)
    }

    /// Builds the arm's model; `seed` drives every random initialization.
    pub fn build(
        self,
        base: &ModelConfig,
        head: HeadInit,
        pretrained: Option<&BackboneState>,
        n_vars: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<PeftModel> {
        let bb = if self.pretrained() {
            Some(pretrained.ok_or_else(|| Error::Config(format!("arm {} needs a pre-trained backbone", self.name())))?)
        } else {
            None
        };
        PeftModel::build(&self.config(base, head), bb, n_vars, seq_len, &mut Rng::new(seed))
    }
}

fn head_name(h: HeadInit) -> &'static str {
    match h {
        HeadInit::Zero => "zero",
        HeadInit::Kaiming => "kaiming",
    }
}

/// `"<arm>/<head>"`, the label runs carry in traces.
pub fn run_label(arm: Arm, head: HeadInit) -> String {
    format!("{}/{}", arm.name(), head_name(head))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub arms: Vec<Arm>,
    pub heads: Vec<HeadInit>,
    /// Model-initialization seeds. The data order comes from `train.seed`
    /// and is shared by every run unless `per_seed_order` is set.
    pub seeds: Vec<u64>,
    /// Shuffle with `train.seed + seed`, so runs differ in data order too.
    pub per_seed_order: bool,
    pub train: TrainConfig,
    /// Epoch whose cross-seed loss dispersion the summary compares.
    pub summary_epoch: usize,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            arms: vec![Arm::Peft, Arm::Full, Arm::Scratch],
            heads: vec![HeadInit::Zero, HeadInit::Kaiming],
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
            summary_epoch: 10,
            per_seed_order: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub sigma_mean: f64,
    pub sigma_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub arm: Arm,
    pub head: HeadInit,
    pub curve: Vec<CurvePoint>,
    /// Cross-seed std of the loss at the summary epoch.
    pub loss_std_at: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadComparison {
    pub arm: Arm,
    pub zero_std: f64,
    pub kaiming_std: f64,
    pub zero_is_steadier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub summary_epoch: usize,
    pub arms: Vec<ArmSummary>,
    pub comparisons: Vec<HeadComparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub traces: Vec<StabilityTrace>,
    pub summary: StabilitySummary,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn summarize(arm: Arm, head: HeadInit, traces: &[&StabilityTrace], epoch: usize) -> ArmSummary {
    let len = traces.iter().map(|t| t.epochs.len()).min().unwrap_or(0);
    let curve = (0..len)
        .map(|e| {
            let loss: Vec<f64> = traces.iter().map(|t| t.epochs[e].loss_mean).collect();
            let sigma: Vec<f64> = traces.iter().map(|t| t.epochs[e].sigma_z_norm).collect();
            let (loss_mean, loss_std) = mean_std(&loss);
            let (sigma_mean, sigma_std) = mean_std(&sigma);
            CurvePoint {
                epoch: traces[0].epochs[e].epoch,
                loss_mean,
                loss_std,
                sigma_mean,
                sigma_std,
            }
        })
        .collect::<Vec<_>>();
    let at: Vec<f64> = traces.iter().filter_map(|t| t.loss_at(epoch)).collect();
    ArmSummary {
        label: run_label(arm, head),
        arm,
        head,
        curve,
        loss_std_at: mean_std(&at).1,
    }
}

/// Fine-tunes every arm × head × seed combination in parallel on the same
/// data order and summarizes the traces. `probe` never enters a gradient.
pub fn stability_experiment(
    base: &ModelConfig,
    pretrained: Option<&BackboneState>,
    train: &WindowSet,
    probe: &WindowSet,
    cfg: &StabilityConfig,
) -> Result<StabilityResult> {
    if cfg.seeds.len() < 2 {
        return Err(Error::Config(format!("need at least 2 seeds, got {}", cfg.seeds.len())));
    }
    let runs: Vec<(Arm, HeadInit, u64)> = cfg
        .arms
        .iter()
        .flat_map(|&a| cfg.heads.iter().flat_map(move |&h| cfg.seeds.iter().map(move |&s| (a, h, s))))
        .collect();
    let traces = runs
        .par_iter()
        .map(|&(arm, head, seed)| {
            let mut model = arm.build(base, head, pretrained, train.n_vars, train.seq_len, seed)?;
            let mut tc = cfg.train.clone();
            if cfg.per_seed_order {
                tc.seed = tc.seed.wrapping_add(seed);
            }
            finetune(&mut model, train, Some(probe), &tc, &run_label(arm, head), seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut arms = Vec::new();
    for &arm in &cfg.arms {
        for &head in &cfg.heads {
            let label = run_label(arm, head);
            let group: Vec<&StabilityTrace> = traces.iter().filter(|t| t.arm == label).collect();
            arms.push(summarize(arm, head, &group, cfg.summary_epoch));
        }
    }
    let comparisons = cfg
        .arms
        .iter()
        .filter_map(|&arm| {
            let find = |h| arms.iter().find(|s: &&ArmSummary| s.arm == arm && s.head == h);
            let (z, k) = (find(HeadInit::Zero)?, find(HeadInit::Kaiming)?);
            Some(HeadComparison {
                arm,
                zero_std: z.loss_std_at,
                kaiming_std: k.loss_std_at,
                zero_is_steadier: z.loss_std_at < k.loss_std_at,
            })
        })
        .collect();
    Ok(StabilityResult {
        traces,
        summary: StabilitySummary {
            summary_epoch: cfg.summary_epoch,
            arms,
            comparisons,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::data::{WindowSample, WindowSet};

    fn toy_set(n: usize, seed: u64) -> WindowSet {
        let mut rng = Rng::new(seed);
        let samples = (0..n)
            .map(|i| WindowSample {
                x: rng.uniform_vec(2 * 16, 1.0).into_iter().map(|v| v.abs()).collect(),
                y: (i % 5) as f64 / 5.0,
                unit_id: i,
                end: i,
            })
            .collect();
        WindowSet::new(2, 16, samples)
    }

    fn base() -> ModelConfig {
        ModelConfig::full(BackboneSpec::from_schedule(3, 1, &[4, 8]), vec![2])
    }

    fn cfg(epochs: usize, lr: f64) -> StabilityConfig {
        StabilityConfig {
            arms: vec![Arm::Peft, Arm::LinearProbe],
            heads: vec![HeadInit::Zero, HeadInit::Kaiming],
            seeds: vec![1, 2, 3],
            train: TrainConfig {
                epochs,
                lr,
                batch_size: 4,
                ..Default::default()
            },
            summary_epoch: 1,
            per_seed_order: false,
        }
    }

    #[test]
    fn one_seed_is_rejected() {
        let bb = BackboneState::build(&base().backbone, &mut Rng::new(0)).unwrap();
        let mut c = cfg(1, 1e-3);
        c.seeds = vec![0];
        assert!(stability_experiment(&base(), Some(&bb), &toy_set(8, 0), &toy_set(4, 1), &c).is_err());
    }

    #[test]
    fn zero_head_starts_identically_and_frozen_lr_keeps_sigma() {
        let bb = BackboneState::build(&base().backbone, &mut Rng::new(0)).unwrap();
        let r = stability_experiment(&base(), Some(&bb), &toy_set(8, 0), &toy_set(4, 1), &cfg(3, 0.0)).unwrap();
        let zero: Vec<_> = r.traces.iter().filter(|t| t.arm.ends_with("/zero")).collect();
        let e0 = zero[0].epochs[0].loss_mean;
        assert!(zero.iter().all(|t| t.epochs[0].loss_mean == e0));
        for t in &r.traces {
            let s0 = t.epochs[0].sigma_z_norm;
            assert!(t.epochs.iter().all(|e| e.sigma_z_norm == s0), "{}", t.arm);
        }
        assert_eq!(r.summary.arms.len(), 4);
        assert_eq!(r.summary.comparisons.len(), 2);
    }
}

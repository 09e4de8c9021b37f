use serde::{Deserialize, Serialize};

use super::metrics::{metrics, MetricsReport};
use super::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::autodiff::{Tape, Tensor};
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::peft::PeftModel;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub gamma: f64,
    pub epochs: usize,
    /// Maximum mini-batch size; the last batch of an epoch may be smaller.
    pub batch_size: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    #[serde(default)]
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            gamma: 0.99,
            epochs: 300,
            batch_size: 8,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and ≥ 0", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("decay {} is outside (0, 1]", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss of the epoch. Epoch 0 is the
    /// untouched model evaluated on the full training set.
    pub loss_mean: f64,
    /// Std across probe samples of the head-feature ℓ2 norm, after the epoch.
    pub sigma_z_norm: f64,
    pub lr: f64,
    pub batch_losses: Vec<f64>,
    pub probe_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrace {
    pub seed: u64,
    pub arm: String,
    pub epochs: Vec<EpochRecord>,
}

impl StabilityTrace {
    pub fn loss_at(&self, epoch: usize) -> Option<f64> {
        self.epochs.iter().find(|r| r.epoch == epoch).map(|r| r.loss_mean)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss_mean)
    }
}

/// Writes traces as CSV: `epoch,loss_mean,sigma_z_norm,lr,seed,arm`.
pub fn write_trace_csv<W: std::io::Write>(out: W, traces: &[StabilityTrace]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "loss_mean", "sigma_z_norm", "lr", "seed", "arm"])?;
    for t in traces {
        for r in &t.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.loss_mean.to_string(),
                r.sigma_z_norm.to_string(),
                r.lr.to_string(),
                t.seed.to_string(),
                t.arm.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Up to `k` samples of `pool`, drawn once with `seed`.
pub fn probe_subset(pool: &WindowSet, k: usize, seed: u64) -> WindowSet {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    Rng::new(seed).shuffle(&mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    pool.subset(&idx)
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode predictions and per-sample head-feature norms.
pub fn predict_all(model: &PeftModel, set: &WindowSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(set.len());
    let mut norms = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = set.batch(chunk);
        let (p, feat) = model.predict_with_features(&x)?;
        preds.extend(p);
        let c = feat.shape()[1];
        norms.extend(feat.data().chunks_exact(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()));
    }
    Ok((preds, norms))
}

pub fn evaluate(model: &PeftModel, test: &WindowSet) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (pred, _) = predict_all(model, test)?;
    metrics(&test.labels(), &pred)
}

fn probe_sigma(model: &PeftModel, probe: Option<&WindowSet>) -> Result<(f64, Vec<f64>)> {
    match probe {
        Some(p) if !p.is_empty() => {
            let (_, norms) = predict_all(model, p)?;
            Ok((std_dev(&norms), norms))
        }
        _ => Ok((0.0, Vec::new())),
    }
}

fn half_mse(y: &[f64], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2 * y.len()) as f64
}

/// One optimization step on `batch`; returns the batch loss.
pub fn train_step(model: &mut PeftModel, opt: &mut AdamW, x: &Tensor, y: &[f64], lr: f64) -> Result<f64> {
    let tape = Tape::new();
    let (loss, grads, bn) = {
        let s = model.session(&tape, true);
        let out = model.forward(&s, x, false)?;
        let target = tape.constant(&Tensor::from_vec(y.to_vec()));
        let loss = out.pred.mse_loss(target)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let g = tape.backward(loss)?;
        (value, s.collect_grads(&g), s.into_bn_updates())
    };
    opt.step(model.store_mut(), &grads, lr)?;
    model.store_mut().apply_bn_updates(&bn);
    Ok(loss)
}

/// Mini-batch AdamW over `train` for `cfg.epochs` epochs. Only tensors that
/// currently require gradients move; a frozen backbone stays bitwise intact.
pub fn finetune(
    model: &mut PeftModel,
    train: &WindowSet,
    probe: Option<&WindowSet>,
    cfg: &TrainConfig,
    arm: &str,
    seed: u64,
) -> Result<StabilityTrace> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut opt = AdamW::new(cfg.adamw);
    let order_rng = Rng::new(cfg.seed);
    let mut trace = StabilityTrace {
        seed,
        arm: arm.to_string(),
        epochs: Vec::with_capacity(cfg.epochs + 1),
    };

    let (pred, _) = predict_all(model, train)?;
    let (sigma, norms) = probe_sigma(model, probe)?;
    trace.epochs.push(EpochRecord {
        epoch: 0,
        loss_mean: half_mse(&train.labels(), &pred),
        sigma_z_norm: sigma,
        lr: lr_schedule(0, cfg.lr, cfg.gamma),
        batch_losses: Vec::new(),
        probe_norms: norms,
    });

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr, cfg.gamma);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.fork(epoch as u64).shuffle(&mut order);
        let mut batch_losses = Vec::new();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let loss = train_step(model, &mut opt, &x, &y, lr)?;
            total += loss * chunk.len() as f64;
            batch_losses.push(loss);
        }
        let (sigma, norms) = probe_sigma(model, probe)?;
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss_mean: total / train.len() as f64,
            sigma_z_norm: sigma,
            lr,
            batch_losses,
            probe_norms: norms,
        });
        log::debug!("{arm} seed {seed} epoch {} loss {:.6}", epoch + 1, total / train.len() as f64);
    }
    Ok(trace)
}

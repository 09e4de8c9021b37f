//! Self-supervised stand-in pre-training: masked reconstruction of
//! univariate windows through the backbone and a throwaway linear decoder.

use serde::{Deserialize, Serialize};

use super::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::autodiff::{Tape, Tensor};
use crate::backbone::{BackboneSpec, BackboneState};
use crate::data::{RunToFailureUnit, WindowSet};
use crate::error::{Error, Result};
use crate::params::{ParamKind, Session};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    /// Share of each window hidden behind one contiguous zeroed block.
    pub mask_ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub adamw: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            gamma: 0.99,
            mask_ratio: 0.25,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Eval-mode reconstruction loss over the pool with fixed masks; entry 0
    /// is before any update.
    pub epoch_loss: Vec<f64>,
}

/// Every channel of every unit cut into length-`window` windows, each scaled
/// to `[0, 1]` on its own (constant windows become 0).
pub fn univariate_pool(units: &[RunToFailureUnit], window: usize, step: usize) -> Vec<Vec<f64>> {
    let mut pool = Vec::new();
    if window == 0 || step == 0 {
        return pool;
    }
    for u in units {
        for ch in &u.series {
            let mut start = 0;
            while start + window <= ch.len() {
                pool.push(scale01(&ch[start..start + window]));
                start += step;
            }
        }
    }
    pool
}

/// Every channel of every prepared window, scaled like [`univariate_pool`].
pub fn window_pool(set: &WindowSet) -> Vec<Vec<f64>> {
    let t = set.seq_len;
    set.samples
        .iter()
        .flat_map(|s| s.x.chunks(t.max(1)).map(scale01))
        .collect()
}

fn scale01(w: &[f64]) -> Vec<f64> {
    let (lo, hi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        w.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; w.len()]
    }
}

fn mask_len(t: usize, ratio: f64) -> usize {
    ((ratio * t as f64).round() as usize).min(t)
}

fn masked(window: &[f64], len: usize, rng: &mut Rng) -> Vec<f64> {
    let mut x = window.to_vec();
    if len > 0 {
        let start = rng.int_range(0, window.len() - len);
        x[start..start + len].iter_mut().for_each(|v| *v = 0.0);
    }
    x
}

struct Decoder {
    weight: crate::params::ParamId,
    bias: crate::params::ParamId,
    flat: usize,
}

fn reconstruct_loss<'t>(
    state: &BackboneState,
    dec: &Decoder,
    s: &Session<'t, '_>,
    inputs: &[Vec<f64>],
    targets: &[&Vec<f64>],
) -> Result<crate::autodiff::Var<'t>> {
    let (r, t) = (inputs.len(), targets[0].len());
    let x = Tensor::new(vec![r, 1, t], inputs.concat())?;
    let y = Tensor::new(vec![r, t], targets.iter().flat_map(|v| v.iter().copied()).collect())?;
    let taps = state.backbone.forward(s, s.tape.constant(&x))?;
    let last = *taps.last().expect("backbone has an embedding tap");
    let flat = last.reshape(&[r, dec.flat])?;
    let pred = flat.matmul(s.var(dec.weight))?.add_bias(s.var(dec.bias))?;
    pred.mse_loss(s.tape.constant(&y))
}

/// Pre-trains a fresh backbone of `spec` on `pool`; every window must share
/// one length. Returns the backbone alone (the decoder is discarded).
pub fn pretrain_proxy(
    spec: &BackboneSpec,
    pool: &[Vec<f64>],
    cfg: &PretrainConfig,
) -> Result<(BackboneState, PretrainReport)> {
    let Some(first) = pool.first() else {
        return Err(Error::EmptyBatch);
    };
    let t = first.len();
    if pool.iter().any(|w| w.len() != t) {
        return Err(Error::Contract("pre-training windows must share one length".into()));
    }
    if !(0.0..=1.0).contains(&cfg.mask_ratio) || cfg.batch_size == 0 {
        return Err(Error::Config("mask ratio must lie in [0, 1] and batch size be ≥ 1".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut state = BackboneState::build(spec, &mut root.fork(0))?;
    state.unfreeze();
    let lens = spec.stage_lengths(t)?;
    let flat = spec.feature_dim() * lens.last().copied().unwrap_or(t);
    let bound = 1.0 / (flat as f64).sqrt();
    let mut init = root.fork(1);
    let dec = Decoder {
        weight: state.store.add(
            "decoder.weight",
            Tensor::new(vec![flat, t], init.uniform_vec(flat * t, bound))?,
            ParamKind::Weight,
        ),
        bias: state.store.add("decoder.bias", Tensor::from_vec(init.uniform_vec(t, bound)), ParamKind::NoDecay),
        flat,
    };
    let m = mask_len(t, cfg.mask_ratio);

    // Fixed masks for the monitoring loss.
    let mut eval_rng = root.fork(2);
    let eval_inputs: Vec<Vec<f64>> = pool.iter().map(|w| masked(w, m, &mut eval_rng)).collect();
    let eval_loss = |state: &BackboneState| -> Result<f64> {
        let mut total = 0.0;
        for (i, chunk) in eval_inputs.chunks(64).enumerate() {
            let tape = Tape::new();
            let s = Session::new(&tape, &state.store, false);
            let targets: Vec<&Vec<f64>> = pool[i * 64..i * 64 + chunk.len()].iter().collect();
            total += reconstruct_loss(state, &dec, &s, chunk, &targets)?.item() * chunk.len() as f64;
        }
        Ok(total / pool.len() as f64)
    };

    let mut report = PretrainReport {
        epoch_loss: vec![eval_loss(&state)?],
    };
    let mut opt = AdamW::new(cfg.adamw);
    let order_rng = root.fork(3);
    let mut mask_rng = root.fork(4);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr, cfg.gamma);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order_rng.fork(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<Vec<f64>> = chunk.iter().map(|&i| masked(&pool[i], m, &mut mask_rng)).collect();
            let targets: Vec<&Vec<f64>> = chunk.iter().map(|&i| &pool[i]).collect();
            let tape = Tape::new();
            let (grads, bn) = {
                // A lone window has no batch statistics to normalize with.
                let s = Session::new(&tape, &state.store, chunk.len() > 1);
                let loss = reconstruct_loss(&state, &dec, &s, &inputs, &targets)?;
                if !loss.item().is_finite() {
                    return Err(Error::NonFinite("reconstruction loss".into()));
                }
                let g = tape.backward(loss)?;
                (s.collect_grads(&g), s.into_bn_updates())
            };
            opt.step(&mut state.store, &grads, lr)?;
            state.store.apply_bn_updates(&bn);
        }
        report.epoch_loss.push(eval_loss(&state)?);
        log::debug!("pretrain epoch {} loss {:.6}", epoch + 1, report.epoch_loss[epoch + 1]);
    }
    let mut out = BackboneState::from_bytes(spec, &state.to_bytes())?;
    out.freeze();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};

    fn pool() -> Vec<Vec<f64>> {
        let units = gen_synthetic(&SyntheticConfig {
            units: 3,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        univariate_pool(&units, 32, 32)
    }

    fn cfg() -> PretrainConfig {
        PretrainConfig {
            epochs: 2,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn pool_windows_are_unit_scaled() {
        let p = pool();
        assert!(!p.is_empty());
        for w in &p {
            assert_eq!(w.len(), 32);
            assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(pretrain_proxy(&BackboneSpec::desk(), &[], &cfg()).is_err());
    }

    #[test]
    fn two_epochs_reduce_loss_and_repeat_exactly() {
        let p = pool();
        let (a, rep) = pretrain_proxy(&BackboneSpec::desk(), &p, &cfg()).unwrap();
        assert!(rep.epoch_loss[2] < rep.epoch_loss[0], "{:?}", rep.epoch_loss);
        let (b, _) = pretrain_proxy(&BackboneSpec::desk(), &p, &cfg()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.is_frozen());
    }

    #[test]
    fn mask_lengths() {
        assert_eq!(mask_len(32, 0.25), 8);
        assert_eq!(mask_len(32, 0.0), 0);
        let w = vec![1.0; 10];
        assert_eq!(masked(&w, 0, &mut Rng::new(0)), w);
        assert_eq!(masked(&w, 3, &mut Rng::new(0)).iter().filter(|v| **v == 0.0).count(), 3);
    }
}

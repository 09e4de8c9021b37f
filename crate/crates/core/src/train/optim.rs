use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, created lazily per parameter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    pub step: u64,
}

/// AdamW with decoupled weight decay: `w ← w·(1 − η·λ)` first (weights
/// only), then the bias-corrected adaptive step.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: OptimizerState::default(),
        }
    }

    /// Applies one update with learning rate `lr` to every `(param, grad)`.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", store.get(*id).name)));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let decay = store.get(*id).kind == ParamKind::Weight;
            let i = id.index();
            if self.state.moments.len() <= i {
                self.state.moments.resize(i + 1, None);
            }
            let (m, v) = self.state.moments[i].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = store.data_mut(*id);
            for k in 0..w.len() {
                if decay {
                    w[k] *= 1.0 - lr * weight_decay;
                }
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `η·γ^epoch`.
pub fn lr_schedule(epoch: usize, lr: f64, gamma: f64) -> f64 {
    lr * gamma.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one(w: f64, kind: ParamKind) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(vec![w]), kind);
        (s, id)
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let (mut s, id) = one(0.7, ParamKind::Weight);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, &[(id, vec![0.0])], 1e-3).unwrap();
        assert_eq!(s.tensor(id).data()[0], 0.7);
    }

    #[test]
    fn zero_grad_decay_scales() {
        let (mut s, id) = one(0.7, ParamKind::Weight);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, &[(id, vec![0.0])], 1e-3).unwrap();
        assert_eq!(s.tensor(id).data()[0], 0.7 * (1.0 - 1e-5));
    }

    #[test]
    fn no_decay_kind_is_not_decayed() {
        let (mut s, id) = one(0.7, ParamKind::NoDecay);
        AdamW::new(AdamWConfig::default()).step(&mut s, &[(id, vec![0.0])], 1e-3).unwrap();
        assert_eq!(s.tensor(id).data()[0], 0.7);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let (mut s, id) = one(0.7, ParamKind::Weight);
        let e = AdamW::new(AdamWConfig::default()).step(&mut s, &[(id, vec![f64::NAN])], 1e-3).unwrap_err();
        assert!(e.to_string().contains('w'));
        assert_eq!(s.tensor(id).data()[0], 0.7);
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_schedule(0, 1e-3, 0.99), 1e-3);
        assert!((lr_schedule(1, 1e-3, 0.99) - 9.9e-4).abs() < 1e-18);
        assert!((lr_schedule(100, 1e-3, 0.99) - 3.660323412732292e-4).abs() < 1e-15);
    }
}

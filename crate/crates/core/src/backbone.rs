//! Univariate 1-D residual CNN backbone.
//!
//! Every variable of a sample enters as its own single-channel stream, so the
//! variable axis is folded into the row (batch) axis and the network never
//! mixes information across variables. With batch norm in eval mode each row
//! is processed fully independently.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Conv1dParams, Tape, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::rng::Rng;

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
}

impl BlockSpec {
    /// Whether the block needs a projected shortcut.
    pub fn reshapes(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub embed: EmbedSpec,
    pub blocks: Vec<BlockSpec>,
}

impl BackboneSpec {
    /// Residual blocks following `schedule` (`schedule[0]` is the embedding
    /// width). A block that changes width also halves the time axis.
    pub fn from_schedule(embed_kernel: usize, embed_stride: usize, schedule: &[usize]) -> Self {
        let blocks = schedule
            .windows(2)
            .map(|w| BlockSpec {
                in_channels: w[0],
                out_channels: w[1],
                stride: if w[0] != w[1] { 2 } else { 1 },
                kernel: 3,
            })
            .collect();
        Self {
            embed: EmbedSpec {
                out_channels: schedule[0],
                kernel: embed_kernel,
                stride: embed_stride,
            },
            blocks,
        }
    }

    /// The eight-block 64→1024 layout.
    pub fn resnet18() -> Self {
        Self::from_schedule(7, 2, &[64, 128, 128, 256, 256, 512, 512, 1024, 1024])
    }

    /// A four-block 16→64 layout small enough for CPU experiments.
    pub fn desk() -> Self {
        Self::from_schedule(7, 2, &[16, 32, 32, 64, 64])
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed.out_channels == 0 || self.embed.kernel == 0 || self.embed.stride == 0 {
            return Err(Error::Spec("input embedding needs positive channels, kernel and stride".into()));
        }
        let mut prev = self.embed.out_channels;
        for (k, b) in self.blocks.iter().enumerate() {
            if b.in_channels != prev {
                return Err(Error::Spec(format!(
                    "block {} expects {} input channels but receives {prev}",
                    k + 1,
                    b.in_channels
                )));
            }
            if b.out_channels == 0 || b.stride == 0 || b.kernel == 0 || b.kernel % 2 == 0 {
                return Err(Error::Spec(format!(
                    "block {} needs positive channels/stride and an odd kernel",
                    k + 1
                )));
            }
            prev = b.out_channels;
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.embed.out_channels, |b| b.out_channels)
    }

    /// Channel width of each tap: embedding, then every block.
    pub fn channel_schedule(&self) -> Vec<usize> {
        std::iter::once(self.embed.out_channels)
            .chain(self.blocks.iter().map(|b| b.out_channels))
            .collect()
    }

    fn embed_conv(&self) -> Conv1dParams {
        Conv1dParams::new(self.embed.stride, self.embed.kernel / 2, 1)
    }

    /// Time length of each tap for an input of length `t`.
    pub fn stage_lengths(&self, t: usize) -> Result<Vec<usize>> {
        let too_short = || Error::dim("backbone_forward", format!("sequence of length {t} is too short for the backbone"));
        let mut len = self.embed_conv().output_len(t, self.embed.kernel).ok_or_else(too_short)?;
        let mut out = vec![len];
        for b in &self.blocks {
            len = Conv1dParams::new(b.stride, b.kernel / 2, 1)
                .output_len(len, b.kernel)
                .ok_or_else(too_short)?;
            out.push(len);
        }
        Ok(out)
    }

    /// Product of all strides: the overall time-axis reduction.
    pub fn total_stride(&self) -> usize {
        self.embed.stride * self.blocks.iter().map(|b| b.stride).product::<usize>()
    }

    /// Closed-form count of learnable backbone parameters (conv weights and
    /// batch-norm affine terms; running statistics excluded).
    pub fn param_count(&self) -> usize {
        let e = &self.embed;
        let mut n = e.out_channels * e.kernel + 2 * e.out_channels;
        for b in &self.blocks {
            n += b.in_channels * b.out_channels * b.kernel + 2 * b.out_channels;
            n += b.out_channels * b.out_channels * b.kernel + 2 * b.out_channels;
            if b.reshapes() {
                n += b.in_channels * b.out_channels + 2 * b.out_channels;
            }
        }
        n
    }
}

/// Convolution followed by batch norm.
#[derive(Clone, Debug)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    conv: Conv1dParams,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (c_in * kernel) as f64;
        let w = Tensor::new(vec![c_out, c_in, kernel], rng.normal_vec(c_out * c_in * kernel, (2.0 / fan_in).sqrt()))
            .expect("conv weight shape");
        Self {
            weight: store.add(format!("{name}.weight"), w, ParamKind::Weight),
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::full(&[c_out], 1.0), ParamKind::NoDecay),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c_out]), ParamKind::NoDecay),
            running_mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[c_out]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.bn.running_var"), Tensor::full(&[c_out], 1.0), ParamKind::Buffer),
            conv: Conv1dParams::new(stride, padding, 1),
        }
    }

    fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.conv1d(s.var(self.weight), self.conv)?;
        let mode = if s.train_bn {
            BnMode::Train
        } else {
            BnMode::Eval {
                running_mean: s.store.tensor(self.running_mean).data(),
                running_var: s.store.tensor(self.running_var).data(),
            }
        };
        let (y, stats) = y.batchnorm1d(s.var(self.gamma), s.var(self.beta), mode)?;
        if let Some(stats) = stats {
            s.record_bn(self.running_mean, self.running_var, stats);
        }
        Ok(y)
    }

    fn ids(&self) -> [ParamId; 5] {
        [self.weight, self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

/// Parameter layout of a backbone inside some [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    embed: ConvBn,
    blocks: Vec<Block>,
    frozen: bool,
}

impl Backbone {
    /// Registers freshly initialized backbone params (He-normal convs,
    /// γ = 1, β = 0) in `store`.
    pub fn build(spec: &BackboneSpec, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let e = &spec.embed;
        let embed = ConvBn::build(store, "backbone.embed", 1, e.out_channels, e.kernel, e.stride, e.kernel / 2, rng);
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let name = format!("backbone.block{}", k + 1);
                let pad = b.kernel / 2;
                Block {
                    conv1: ConvBn::build(store, &format!("{name}.conv1"), b.in_channels, b.out_channels, b.kernel, b.stride, pad, rng),
                    conv2: ConvBn::build(store, &format!("{name}.conv2"), b.out_channels, b.out_channels, b.kernel, 1, pad, rng),
                    shortcut: b.reshapes().then(|| {
                        ConvBn::build(store, &format!("{name}.shortcut"), b.in_channels, b.out_channels, 1, b.stride, 0, rng)
                    }),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            embed,
            blocks,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.embed.ids().to_vec();
        for b in &self.blocks {
            ids.extend(b.conv1.ids());
            ids.extend(b.conv2.ids());
            if let Some(s) = &b.shortcut {
                ids.extend(s.ids());
            }
        }
        ids
    }

    /// Stops (or restarts) gradient flow into every backbone tensor and the
    /// running-statistics updates, together. Idempotent.
    pub fn set_frozen(&mut self, store: &mut ParamStore, frozen: bool) {
        store.set_trainable(self.param_ids(), !frozen);
        self.frozen = frozen;
    }

    /// Input embedding: conv → BN → ReLU on `[R×1×T]` streams.
    pub fn forward_embed<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != 1 {
            return Err(Error::dim("backbone_forward", format!("expected [rows×1×T] streams, got {shape:?}")));
        }
        self.spec.stage_lengths(shape[2])?;
        Ok(self.embed.forward(s, x)?.relu())
    }

    /// Residual block `k` (0-based).
    pub fn forward_block<'t>(&self, s: &Session<'t, '_>, k: usize, x: Var<'t>) -> Result<Var<'t>> {
        let b = &self.blocks[k];
        let h = b.conv1.forward(s, x)?.relu();
        let h = b.conv2.forward(s, h)?;
        let skip = match &b.shortcut {
            Some(sc) => sc.forward(s, x)?,
            None => x,
        };
        Ok(h.add(skip)?.relu())
    }

    /// All taps: the embedding output followed by every block output.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut z = self.forward_embed(s, x)?;
        let mut taps = vec![z];
        for k in 0..self.blocks.len() {
            z = self.forward_block(s, k, z)?;
            taps.push(z);
        }
        Ok(taps)
    }
}

/// Intermediate activations `z⁽¹⁾…`, each `[rows × d_k × T_k]`.
#[derive(Clone, Debug)]
pub struct LayerTaps {
    pub taps: Vec<Tensor>,
}

/// A standalone backbone with its own parameter store.
#[derive(Clone, Debug)]
pub struct BackboneState {
    pub backbone: Backbone,
    pub store: ParamStore,
}

impl BackboneState {
    pub fn build(spec: &BackboneSpec, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::build(spec, &mut store, rng)?;
        Ok(Self { backbone, store })
    }

    pub fn spec(&self) -> &BackboneSpec {
        self.backbone.spec()
    }

    pub fn param_count(&self) -> usize {
        self.store.count_where(|p| p.name.starts_with(BACKBONE_PREFIX))
    }

    pub fn freeze(&mut self) {
        self.backbone.set_frozen(&mut self.store, true);
    }

    pub fn unfreeze(&mut self) {
        self.backbone.set_frozen(&mut self.store, false);
    }

    pub fn is_frozen(&self) -> bool {
        self.backbone.is_frozen()
    }

    /// Eval-mode forward of `[rows×1×T]` streams, one row per variable.
    pub fn forward_taps(&self, streams: &Tensor) -> Result<LayerTaps> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store, false);
        let x = tape.constant(streams);
        let taps = self.backbone.forward(&s, x)?;
        Ok(LayerTaps {
            taps: taps.iter().map(Var::value).collect(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.store.encode_prefix(BACKBONE_PREFIX)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(spec: &BackboneSpec, bytes: &[u8]) -> Result<Self> {
        let tensors = checkpoint::decode(bytes)?;
        let mut state = Self::build(spec, &mut Rng::new(0))?;
        state.store.load_prefix(BACKBONE_PREFIX, &tensors)?;
        Ok(state)
    }

    pub fn load_weights(spec: &BackboneSpec, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(spec, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> BackboneSpec {
        BackboneSpec {
            embed: EmbedSpec {
                out_channels: 4,
                kernel: 3,
                stride: 1,
            },
            blocks: vec![BlockSpec {
                in_channels: 4,
                out_channels: 6,
                stride: 2,
                kernel: 3,
            }],
        }
    }

    #[test]
    fn one_block_param_count_matches_hand_count() {
        // embed: 1·4·3 + 2·4; conv1: 4·6·3 + 2·6; conv2: 6·6·3 + 2·6; shortcut: 4·6 + 2·6
        let hand = (12 + 8) + (72 + 12) + (108 + 12) + (24 + 12);
        let state = BackboneState::build(&toy(), &mut Rng::new(1)).unwrap();
        assert_eq!(toy().param_count(), hand);
        assert_eq!(state.param_count(), hand);
    }

    #[test]
    fn broken_channel_chain_is_a_spec_error() {
        let mut spec = toy();
        spec.blocks[0].in_channels = 5;
        assert!(matches!(BackboneState::build(&spec, &mut Rng::new(0)), Err(Error::Spec(_))));
    }

    #[test]
    fn default_schedule_and_size() {
        let spec = BackboneSpec::resnet18();
        assert_eq!(spec.blocks.len(), 8);
        assert_eq!(spec.channel_schedule(), vec![64, 128, 128, 256, 256, 512, 512, 1024, 1024]);
        let strides: Vec<_> = spec.blocks.iter().map(|b| b.stride).collect();
        assert_eq!(strides, vec![2, 1, 2, 1, 2, 1, 2, 1]);
        let n = spec.param_count() as f64;
        assert!((n - 15e6).abs() <= 0.2 * 15e6, "{n}");
    }

    #[test]
    fn stage_lengths_follow_strides() {
        let spec = BackboneSpec::resnet18();
        assert_eq!(spec.stage_lengths(1024).unwrap(), vec![512, 256, 256, 128, 128, 64, 64, 32, 32]);
        assert_eq!(spec.total_stride(), 32);
        // Padding keeps every stage non-empty, even past the total stride.
        assert_eq!(spec.stage_lengths(30).unwrap(), vec![15, 8, 8, 4, 4, 2, 2, 1, 1]);
        assert!(spec.stage_lengths(0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = BackboneState::build(&toy(), &mut Rng::new(9)).unwrap();
        let b = BackboneState::build(&toy(), &mut Rng::new(9)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn freeze_is_idempotent() {
        let mut s = BackboneState::build(&toy(), &mut Rng::new(0)).unwrap();
        s.freeze();
        s.freeze();
        assert!(s.is_frozen());
        assert!(s.store.iter().all(|(_, p)| !p.trainable()));
        s.unfreeze();
        assert!(s.store.iter().any(|(_, p)| p.trainable()));
    }
}

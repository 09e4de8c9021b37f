//! Low-rank tuning adapters, meta-variable fusion and the regression head.
//!
//! Row layout inside a forward pass: every sample contributes `N` data rows
//! followed by one meta row, so sample `b` owns rows `b·(N+1) .. b·(N+1)+N`.
//! Mean pooling over consecutive groups of `N+1` rows is then exactly the
//! per-sample pooling along the variable axis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv1dParams, Tape, Tensor, Var};
use crate::backbone::{Backbone, BackboneSpec, BackboneState, BACKBONE_PREFIX};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::rng::Rng;

pub const PEFT_PREFIX: &str = "peft.";
pub const META_PREFIX: &str = "meta.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// All-zero weights and bias.
    Zero,
    /// He-normal weights, no bias.
    Kaiming,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// Projected dimension `r_k` per backbone block.
    pub ranks: Vec<usize>,
    /// Attach the low-rank tuning path to every block.
    pub adapters: bool,
    /// Fuse variables through the meta-variable; otherwise the head sees the
    /// mean of the per-variable features.
    pub meta_variable: bool,
    pub head_init: HeadInit,
    pub freeze_backbone: bool,
}

impl ModelConfig {
    /// Eight-block backbone with ranks `[128, 32, 32, 4, 4, 2, 2, 1]`.
    pub fn resnet18() -> Self {
        Self::full(BackboneSpec::resnet18(), vec![128, 32, 32, 4, 4, 2, 2, 1])
    }

    /// Four-block desk-scale model.
    pub fn desk() -> Self {
        Self::full(BackboneSpec::desk(), vec![32, 8, 8, 2])
    }

    /// Adapters, meta-variable, zero head and a frozen backbone.
    pub fn full(backbone: BackboneSpec, ranks: Vec<usize>) -> Self {
        Self {
            backbone,
            ranks,
            adapters: true,
            meta_variable: true,
            head_init: HeadInit::Zero,
            freeze_backbone: true,
        }
    }

    /// Frozen backbone, no adapters, mean-pooled features, zero head.
    pub fn linear_probe(mut self) -> Self {
        self.adapters = false;
        self.meta_variable = false;
        self.head_init = HeadInit::Zero;
        self.freeze_backbone = true;
        self
    }

    /// Trainable backbone, no adapters, mean-pooled features.
    pub fn full_finetune(mut self) -> Self {
        self.adapters = false;
        self.meta_variable = false;
        self.freeze_backbone = false;
        self
    }

    pub fn with_head(mut self, init: HeadInit) -> Self {
        self.head_init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.adapters {
            if self.ranks.len() != self.backbone.blocks.len() {
                return Err(Error::Config(format!(
                    "{} ranks given for {} backbone blocks",
                    self.ranks.len(),
                    self.backbone.blocks.len()
                )));
            }
            if self.ranks.contains(&0) {
                return Err(Error::Config("every rank must be at least 1".into()));
            }
            for (k, b) in self.backbone.blocks.iter().enumerate() {
                if b.reshapes() && b.out_channels % b.in_channels != 0 {
                    return Err(Error::Config(format!(
                        "block {}: depthwise alignment needs {} to be a multiple of {}",
                        k + 1,
                        b.out_channels,
                        b.in_channels
                    )));
                }
            }
        }
        if self.meta_variable && !self.adapters {
            return Err(Error::Config("the meta-variable fuses through the adapters; enable them".into()));
        }
        Ok(())
    }

    /// Per-layer adapter shapes.
    pub fn layer_specs(&self) -> Vec<PeftLayerSpec> {
        if !self.adapters {
            return Vec::new();
        }
        self.backbone
            .blocks
            .iter()
            .zip(&self.ranks)
            .enumerate()
            .map(|(k, (b, &r))| PeftLayerSpec {
                layer: k + 1,
                d_in: b.in_channels,
                rank: r,
                align: b.reshapes().then_some(AlignSpec {
                    out_channels: b.out_channels,
                    kernel: 3,
                    stride: b.stride,
                }),
            })
            .collect()
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantFlags {
    pub pretrain: bool,
    pub meta_variable: bool,
    pub zero_init: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self {
            pretrain: true,
            meta_variable: true,
            zero_init: true,
        }
    }
}

/// Depthwise alignment convolution: `d_in` groups, each emitting
/// `out_channels / d_in` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeftLayerSpec {
    /// 1-based block index.
    pub layer: usize,
    pub d_in: usize,
    pub rank: usize,
    pub align: Option<AlignSpec>,
}

impl PeftLayerSpec {
    /// `A`, `B`, optional gate `W`, and the alignment kernels.
    pub fn param_count(&self, with_gate: bool) -> usize {
        let (d, r) = (self.d_in, self.rank);
        2 * d * r + if with_gate { r * r } else { 0 } + self.align.map_or(0, |a| a.out_channels * a.kernel)
    }
}

#[derive(Clone, Debug)]
struct PeftLayer {
    spec: PeftLayerSpec,
    a: ParamId,
    b: ParamId,
    w: Option<ParamId>,
    align: Option<(ParamId, Conv1dParams)>,
}

impl PeftLayer {
    fn build(store: &mut ParamStore, spec: PeftLayerSpec, gate: bool, rng: &mut Rng) -> Self {
        let (d, r) = (spec.d_in, spec.rank);
        let name = format!("peft.layer{}", spec.layer);
        let a = Tensor::new(vec![d, r], rng.uniform_vec(d * r, 1.0 / (d as f64).sqrt())).expect("A shape");
        let a = store.add(format!("{name}.A"), a, ParamKind::Weight);
        let b = store.add(format!("{name}.B"), Tensor::zeros(&[r, d]), ParamKind::Weight);
        let w = gate.then(|| {
            let w = Tensor::new(vec![r, r], rng.uniform_vec(r * r, 1.0 / (r as f64).sqrt())).expect("W shape");
            store.add(format!("{name}.W"), w, ParamKind::Weight)
        });
        let align = spec.align.map(|al| {
            let n = al.out_channels * al.kernel;
            let w = Tensor::new(vec![al.out_channels, 1, al.kernel], rng.uniform_vec(n, 1.0 / (al.kernel as f64).sqrt()))
                .expect("align shape");
            let id = store.add(format!("{name}.align.weight"), w, ParamKind::Weight);
            (id, Conv1dParams::new(al.stride, al.kernel / 2, d))
        });
        Self { spec, a, b, w, align }
    }

    /// `SiLU(Conv(pre·B))` for an `[R×r×T]` low-rank input.
    fn expand<'t>(&self, s: &Session<'t, '_>, pre: Var<'t>) -> Result<Var<'t>> {
        let mut y = pre.channel_matmul(s.var(self.b))?;
        if let Some((w, p)) = self.align {
            y = y.conv1d(s.var(w), p)?;
        }
        Ok(y.silu())
    }
}

/// Linear head `ŷ = φ·f + b`.
#[derive(Clone, Debug)]
pub struct Regressor {
    weight: ParamId,
    bias: Option<ParamId>,
    init: HeadInit,
}

impl Regressor {
    fn build(store: &mut ParamStore, dim: usize, init: HeadInit, rng: &mut Rng) -> Self {
        match init {
            HeadInit::Zero => Self {
                weight: store.add("head.weight", Tensor::zeros(&[dim]), ParamKind::Weight),
                bias: Some(store.add("head.bias", Tensor::zeros(&[1]), ParamKind::NoDecay)),
                init,
            },
            HeadInit::Kaiming => {
                let w = Tensor::from_vec(rng.normal_vec(dim, (2.0 / dim as f64).sqrt()));
                Self {
                    weight: store.add("head.weight", w, ParamKind::Weight),
                    bias: None,
                    init,
                }
            }
        }
    }

    pub fn init(&self) -> HeadInit {
        self.init
    }

    fn forward<'t>(&self, s: &Session<'t, '_>, feat: Var<'t>) -> Result<Var<'t>> {
        let shape = feat.shape();
        let (b, c) = (shape[0], shape[1]);
        let mut y = feat.matmul(s.var(self.weight).reshape(&[c, 1])?)?;
        if let Some(bias) = self.bias {
            y = y.add_bias(s.var(bias))?;
        }
        y.reshape(&[b])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    /// Learnable backbone parameters (running statistics excluded).
    pub backbone_total: usize,
    /// Adapters, alignment convs, meta-variable and head.
    pub peft_trainable: usize,
    pub adapters: usize,
    pub align: usize,
    pub meta: usize,
    pub head_weights: usize,
    pub head_bias: usize,
    /// Every tensor that receives gradients under the current freeze state.
    pub trainable: usize,
    pub ratio: f64,
}

/// Outputs of one forward pass.
pub struct Forward<'t> {
    /// `[B]` predictions.
    pub pred: Var<'t>,
    /// `[B×C]` representation handed to the head.
    pub features: Var<'t>,
    /// Data-row activations at every stage (only when requested).
    pub data_taps: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct PeftModel {
    cfg: ModelConfig,
    n_vars: usize,
    seq_len: usize,
    store: ParamStore,
    backbone: Backbone,
    layers: Vec<PeftLayer>,
    meta_u: Option<ParamId>,
    head: Regressor,
}

impl PeftModel {
    /// Builds a model around `backbone`, or around a fresh random backbone
    /// drawn from `rng` when `None`.
    pub fn build(
        cfg: &ModelConfig,
        backbone: Option<&BackboneState>,
        n_vars: usize,
        seq_len: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if n_vars == 0 {
            return Err(Error::Contract("a sample needs at least one data variable".into()));
        }
        cfg.backbone.stage_lengths(seq_len)?;
        let mut store = ParamStore::new();
        let mut bb_rng = rng.fork(0);
        let mut bb = Backbone::build(&cfg.backbone, &mut store, &mut bb_rng)?;
        if let Some(src) = backbone {
            if src.spec() != &cfg.backbone {
                return Err(Error::Config("pre-trained backbone does not match the configured spec".into()));
            }
            let tensors = checkpoint::decode(&src.to_bytes())?;
            store.load_prefix(BACKBONE_PREFIX, &tensors)?;
        }
        bb.set_frozen(&mut store, cfg.freeze_backbone);

        let mut peft_rng = rng.fork(1);
        let layers = cfg
            .layer_specs()
            .into_iter()
            .map(|spec| PeftLayer::build(&mut store, spec, cfg.meta_variable, &mut peft_rng))
            .collect();
        let meta_u = cfg
            .meta_variable
            .then(|| store.add("meta.u", Tensor::zeros(&[1, 1, seq_len]), ParamKind::NoDecay));
        let head = Regressor::build(&mut store, cfg.backbone.feature_dim(), cfg.head_init, &mut rng.fork(2));
        Ok(Self {
            cfg: cfg.clone(),
            n_vars,
            seq_len,
            store,
            backbone: bb,
            layers,
            meta_u,
            head,
        })
    }

    /// The ablation grid: `pretrain` chooses between `pretrained` and a random
    /// backbone, `meta_variable` between fusion and plain feature averaging,
    /// `zero_init` between the zero and the He-normal head.
    pub fn build_variant(
        base: &ModelConfig,
        flags: VariantFlags,
        pretrained: Option<&BackboneState>,
        n_vars: usize,
        seq_len: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut cfg = base.clone();
        cfg.meta_variable = flags.meta_variable;
        cfg.head_init = if flags.zero_init { HeadInit::Zero } else { HeadInit::Kaiming };
        let bb = if flags.pretrain {
            Some(pretrained.ok_or_else(|| Error::Config("pretrain variant needs a backbone checkpoint".into()))?)
        } else {
            None
        };
        Self::build(&cfg, bb, n_vars, seq_len, rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Regressor {
        &self.head
    }

    pub fn has_meta(&self) -> bool {
        self.meta_u.is_some()
    }

    pub fn layer_specs(&self) -> Vec<PeftLayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Looks up a parameter such as `peft.layer1.A` or `meta.u`.
    pub fn param(&self, name: &str) -> Option<ParamId> {
        self.store.find(name)
    }

    /// A forward session. Batch norm uses batch statistics only while
    /// training an unfrozen backbone.
    pub fn session<'t, 's>(&'s self, tape: &'t Tape, training: bool) -> Session<'t, 's> {
        Session::new(tape, &self.store, training && !self.backbone.is_frozen())
    }

    pub fn count_params(&self) -> ParamCount {
        let backbone_total = self.store.count_where(|p| p.name.starts_with(BACKBONE_PREFIX));
        let align = self
            .store
            .count_where(|p| p.name.starts_with(PEFT_PREFIX) && p.name.ends_with(".align.weight"));
        let adapters = self.store.count_where(|p| p.name.starts_with(PEFT_PREFIX)) - align;
        let meta = self.store.count_where(|p| p.name.starts_with(META_PREFIX));
        let head_weights = self.store.count_where(|p| p.name == "head.weight");
        let head_bias = self.store.count_where(|p| p.name == "head.bias");
        let peft_trainable = adapters + align + meta + head_weights + head_bias;
        ParamCount {
            backbone_total,
            peft_trainable,
            adapters,
            align,
            meta,
            head_weights,
            head_bias,
            trainable: self.store.count_where(|p| p.trainable()),
            ratio: peft_trainable as f64 / backbone_total as f64,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::dim("model_forward", format!("expected [batch×vars×time], got {s:?}")));
        }
        if s[1] == 0 {
            return Err(Error::Contract("a sample needs at least one data variable".into()));
        }
        if s[1] != self.n_vars || s[2] != self.seq_len {
            return Err(Error::dim(
                "model_forward",
                format!(
                    "model expects {} variables × {} steps, got {:?}",
                    self.n_vars, self.seq_len, s
                ),
            ));
        }
        if s[0] == 0 {
            return Err(Error::EmptyBatch);
        }
        if x.data().iter().any(|v| !(-1.0..=2.0).contains(v)) {
            log::warn!("model input has values outside [-1, 2]; was it min-max normalized?");
        }
        Ok(s[0])
    }

    /// Full forward over a `[B×N×T]` batch.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: &Tensor, keep_taps: bool) -> Result<Forward<'t>> {
        let b = self.check_input(x)?;
        let n = self.n_vars;
        let t = self.seq_len;
        let data = s.tape.constant(&x.clone().reshape(&[b * n, 1, t])?);

        let rows = RowLayout::new(b, n, self.has_meta());
        let mut z = match self.meta_u {
            Some(u) => data.concat_rows(s.var(u).broadcast_rows(b)?)?.gather_rows(&rows.perm)?,
            None => data,
        };

        let mut data_taps = Vec::new();
        z = self.backbone.forward_embed(s, z)?;
        if keep_taps {
            data_taps.push(rows.data_rows(z)?);
        }
        for k in 0..self.backbone.num_blocks() {
            z = self.layer_forward(s, k, z, &rows)?;
            if keep_taps {
                data_taps.push(rows.data_rows(z)?);
            }
        }

        let features = match self.meta_u {
            Some(_) => z.gather_rows(&rows.meta_idx)?.global_avg_pool_time()?,
            None => z.global_avg_pool_time()?.mean_pool_vars(n)?,
        };
        let pred = self.head.forward(s, features)?;
        Ok(Forward {
            pred,
            features,
            data_taps,
        })
    }

    /// Block `k` plus its tuning path on joint rows.
    fn layer_forward<'t>(&self, s: &Session<'t, '_>, k: usize, z: Var<'t>, rows: &RowLayout) -> Result<Var<'t>> {
        let bb = self.backbone.forward_block(s, k, z)?;
        let Some(layer) = self.layers.get(k) else {
            return Ok(bb);
        };
        let v = z.channel_matmul(s.var(layer.a))?;
        let pre = match layer.w {
            Some(w) if rows.meta => {
                let gate = v.channel_matmul(s.var(w))?.sigmoid().mul(v)?;
                let pooled = gate.mean_pool_vars(rows.n + 1)?;
                v.gather_rows(&rows.data_idx)?.concat_rows(pooled)?.gather_rows(&rows.perm)?
            }
            _ => v,
        };
        let side = layer.expand(s, pre)?;
        let (ss, bs) = (side.shape(), bb.shape());
        if ss != bs {
            return Err(Error::Alignment {
                layer: k + 1,
                side: ss,
                backbone: bs,
            });
        }
        bb.add(side)
    }

    /// Eval-mode predictions.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let s = self.session(&tape, false);
        let out = self.forward(&s, x, false)?;
        let pred = out.pred.data().to_vec();
        Ok(pred)
    }

    /// Eval-mode predictions and head features.
    pub fn predict_with_features(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let tape = Tape::new();
        let s = self.session(&tape, false);
        let out = self.forward(&s, x, false)?;
        let pred = out.pred.data().to_vec();
        Ok((pred, out.features.value()))
    }

    /// Eval-mode data-row activations at every stage, `[B·N × d × T_k]` each.
    pub fn data_taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let s = self.session(&tape, false);
        let out = self.forward(&s, x, true)?;
        Ok(out.data_taps.iter().map(Var::value).collect())
    }

    /// Backbone tensors only.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        self.store.encode_prefix(BACKBONE_PREFIX)
    }

    /// Every tensor: backbone, adapters, meta-variable and head.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.store.encode_prefix("")
    }

    /// Adapters, meta-variable and head.
    pub fn tuned_bytes(&self) -> Vec<u8> {
        let mut named = Vec::new();
        for (_, p) in self.store.iter() {
            if [PEFT_PREFIX, META_PREFIX, HEAD_PREFIX].iter().any(|pre| p.name.starts_with(pre)) {
                named.push((p.name.as_str(), &p.tensor));
            }
        }
        checkpoint::encode(named, checkpoint::Dtype::F64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every tensor from a full-model checkpoint.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let tensors = checkpoint::decode(bytes)?;
        self.store.load_prefix("", &tensors)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

/// Index bookkeeping for the interleaved row layout.
struct RowLayout {
    n: usize,
    meta: bool,
    /// Joint position → row of `concat(data rows, meta rows)`.
    perm: Vec<usize>,
    data_idx: Vec<usize>,
    meta_idx: Vec<usize>,
}

impl RowLayout {
    fn new(b: usize, n: usize, meta: bool) -> Self {
        if !meta {
            return Self {
                n,
                meta,
                perm: (0..b * n).collect(),
                data_idx: (0..b * n).collect(),
                meta_idx: Vec::new(),
            };
        }
        let g = n + 1;
        let mut perm = Vec::with_capacity(b * g);
        for bi in 0..b {
            perm.extend((0..n).map(|i| bi * n + i));
            perm.push(b * n + bi);
        }
        Self {
            n,
            meta,
            perm,
            data_idx: (0..b).flat_map(|bi| (0..n).map(move |i| bi * g + i)).collect(),
            meta_idx: (0..b).map(|bi| bi * g + n).collect(),
        }
    }

    fn data_rows<'t>(&self, z: Var<'t>) -> Result<Var<'t>> {
        if self.meta {
            z.gather_rows(&self.data_idx)
        } else {
            Ok(z)
        }
    }
}

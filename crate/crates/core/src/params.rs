//! Named parameter storage shared by the backbone, adapters and regressor.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autodiff::{BatchStats, Grads, Tape, Tensor, Var};
use crate::checkpoint::{self, CheckpointError, Dtype};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized, with decoupled weight decay.
    Weight,
    /// Optimized, never decayed (biases, norm affine terms, the meta-variable).
    NoDecay,
    /// Non-trainable state such as running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer && self.tensor.requires_grad()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Non-buffer params start out trainable.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        tensor.set_requires_grad(kind != ParamKind::Buffer);
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, ids: impl IntoIterator<Item = ParamId>, on: bool) {
        for id in ids {
            let p = &mut self.params[id.0];
            if p.kind != ParamKind::Buffer {
                p.tensor.set_requires_grad(on);
            }
        }
    }

    /// Total element count of the non-buffer params matching `pred`.
    pub fn count_where(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer && pred(p))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Serializes every entry whose name starts with `prefix`, in registration order.
    pub fn encode_prefix(&self, prefix: &str) -> Vec<u8> {
        checkpoint::encode(
            self.params
                .iter()
                .filter(|p| p.name.starts_with(prefix))
                .map(|p| (p.name.as_str(), &p.tensor)),
            Dtype::F64,
        )
    }

    /// Overwrites the values of every entry under `prefix` from `tensors`.
    /// Every such entry must be present with its exact shape, and no tensor
    /// under `prefix` may be left unmatched.
    pub fn load_prefix(&mut self, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
        let wanted: Vec<usize> = (0..self.params.len())
            .filter(|&i| self.params[i].name.starts_with(prefix))
            .collect();
        for (name, _) in tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            if !self.index.contains_key(name) {
                return Err(CheckpointError::Unexpected(name.clone()).into());
            }
        }
        for i in wanted {
            let p = &mut self.params[i];
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            if t.shape() != p.tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].tensor.data_mut()
    }
}

/// One forward pass: the tape, the params bound onto it, and the running-stat
/// updates observed by training-mode batch norm.
pub struct Session<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    vars: Vec<Option<Var<'t>>>,
    pub train_bn: bool,
    bn_updates: RefCell<Vec<(ParamId, ParamId, BatchStats)>>,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, train_bn: bool) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| (p.kind != ParamKind::Buffer).then(|| tape.leaf(&p.tensor)))
            .collect();
        Self {
            tape,
            store,
            vars,
            train_bn,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0].expect("buffers are not bound to the tape")
    }

    pub(crate) fn record_bn(&self, mean: ParamId, var: ParamId, stats: BatchStats) {
        self.bn_updates.borrow_mut().push((mean, var, stats));
    }

    /// Gradients of every trainable param, in store order.
    pub fn collect_grads(&self, grads: &Grads) -> Vec<(ParamId, Vec<f64>)> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, _)| (id, grads.get_or_zero(self.var(id))))
            .collect()
    }

    pub fn into_bn_updates(self) -> Vec<(ParamId, ParamId, BatchStats)> {
        self.bn_updates.into_inner()
    }
}

impl ParamStore {
    pub fn apply_bn_updates(&mut self, updates: &[(ParamId, ParamId, BatchStats)]) {
        for (mean, var, stats) in updates {
            let mut m = self.tensor(*mean).data().to_vec();
            let mut v = self.tensor(*var).data().to_vec();
            stats.update_running(&mut m, &mut v);
            self.data_mut(*mean).copy_from_slice(&m);
            self.data_mut(*var).copy_from_slice(&v);
        }
    }
}

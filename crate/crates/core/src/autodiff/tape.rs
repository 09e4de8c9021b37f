use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Inputs handed to a node's local-gradient rule during the backward sweep.
pub(crate) struct BackwardCtx<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub output: &'a [f64],
    pub grad: &'a [f64],
    /// `needs[i]` is false when parent `i` does not lead to any leaf that
    /// requires a gradient; rules may skip that parent entirely.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Append-only record of a forward pass.
///
/// Node ids are assigned in execution order, so the id order is a valid
/// topological order and the backward sweep simply walks ids in reverse.
/// A tape is built fresh for every forward pass and confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zero(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; var.numel()])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `tensor` as a leaf. Gradients are tracked iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push_node(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Vec::new(),
            tensor.requires_grad(),
            None,
        )
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push_node(tensor.shape().to_vec(), tensor.data().to_vec(), Vec::new(), false, None)
    }

    /// Runs `f` over the (shape, values) of each var without copying.
    pub(crate) fn with_values<R>(&self, vars: &[Var<'_>], f: impl FnOnce(&[(&[usize], &[f64])]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let views: Vec<(&[usize], &[f64])> = vars
            .iter()
            .map(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "var recorded on a different tape");
                let n = &nodes[v.id];
                (n.shape.as_slice(), n.value.as_slice())
            })
            .collect();
        f(&views)
    }

    pub(crate) fn push_node(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            parents,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an op whose inputs are `parents`.
    pub(crate) fn push_op(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        parents: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            #[cfg(debug_assertions)]
            {
                let finite_in = parents
                    .iter()
                    .all(|p| nodes[p.id].value.iter().all(|v| v.is_finite()));
                debug_assert!(
                    !finite_in || value.iter().all(|v| v.is_finite()),
                    "op produced a non-finite value from finite inputs"
                );
            }
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(
            shape,
            value,
            parents.iter().map(|p| p.id).collect(),
            requires_grad,
            Some(backward),
        )
    }

    /// Reverse sweep from a scalar `output`, seeding its gradient with 1.
    pub fn backward(&self, output: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must be scalar, got shape {:?}", out.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| nodes[p].value.as_slice()).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = rule(&ctx);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Borrowed view of the values; drop before recording further ops.
    pub fn data(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape invariant")
    }

    /// Single value of a one-element var.
    pub fn item(&self) -> f64 {
        let d = self.data();
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    pub(crate) fn with_value<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        f(&n.shape, &n.value)
    }
}

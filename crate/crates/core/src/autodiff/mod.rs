//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, compare_grads, grad_check, ABS_FLOOR, DEFAULT_STEP};
pub use ops::{sigmoid_scalar, silu_scalar, BatchStats, BnMode, Conv1dParams, BN_EPS, BN_MOMENTUM};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

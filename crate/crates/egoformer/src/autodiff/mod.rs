//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Exactly the primitive set the model needs, nothing more: matmul (plain
//! and batched), permute/reshape, broadcasting arithmetic, concat/slice,
//! masked softmax, layer norm, ReLU, inverted dropout, clamped log, square,
//! reductions, and the two classification losses. Double precision
//! throughout; gradient checks live in [`check`].

mod array;
mod check;
mod tape;

pub use array::{broadcast_shape, layernorm_rows, softmax_row_masked, Array};
pub use check::{gradient_check, LossFn};
pub use tape::{AttnMask, Gradients, Tape, Var};

pub(crate) use array::matmul;

/// Raw matmul kernel exposed for benches.
#[doc(hidden)]
pub use array::matmul as raw_matmul;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("loss function is not deterministic (is dropout still enabled?)")]
    NonDeterministic,
}

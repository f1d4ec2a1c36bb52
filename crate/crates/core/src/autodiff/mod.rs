//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node that
//! remembers how to push gradients back to its inputs. Nodes are appended in
//! evaluation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Gradients accumulate on fan-out: a leaf read by several operations
//! receives the sum of every path's contribution.

mod check;
mod tape;
mod tensor;

pub use check::finite_difference_check;
pub use tape::{Gradients, Mark, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward: seed gradient has {got} elements, output has {expected}")]
    SeedShape { expected: usize, got: usize },
    #[error("non-finite loss value {0}")]
    NonFinite(f64),
    #[error("finite difference step must be positive, got {0}")]
    BadStep(f64),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

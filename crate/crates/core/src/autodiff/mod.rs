//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the recording in reverse. Only the operations the encoder and the
//! losses need are provided.

mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: {what} {value} outside [{min}, {max}]")]
    OutOfRange {
        op: &'static str,
        what: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },
    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss is not recorded on this tape")]
    LossNotOnTape,
    #[error("variable belongs to another tape")]
    ForeignVar,
}

impl AutodiffError {
    pub(crate) fn with_op(self, name: &'static str) -> Self {
        match self {
            AutodiffError::ZeroNorm { row, .. } => AutodiffError::ZeroNorm { op: name, row },
            other => other,
        }
    }
}

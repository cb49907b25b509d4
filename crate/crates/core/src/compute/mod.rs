//! Dense arrays, a reverse-mode tape, and a finite-difference gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
mod lstm;
pub mod ops;
mod store;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use lstm::{lstm_cell, LstmParams};
pub use ops::Nonlinearity;
pub use store::{Gradients, ParamId, ParameterStore};
pub use tape::{set_corrupt_tanh_gradient, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComputeError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension { op: String, left: Vec<usize>, right: Vec<usize> },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; higher-order gradients are not supported")]
    DoubleBackward,
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

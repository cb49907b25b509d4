use std::io;

use thiserror::Error;

use crate::compute::ComputeError;
use crate::corpus::CorpusError;

/// Errors raised by the model, training and decoding layers.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f64, epoch: usize, batch: usize },
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

use std::path::PathBuf;

use rpose_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("configuration: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid annotation: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

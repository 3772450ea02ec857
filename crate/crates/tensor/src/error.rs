use thiserror::Error;

/// Errors raised by tensor construction, graph operations and the container format.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}: {detail}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        detail: String,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("{op}: batch statistics need at least two elements per channel, got {count}")]
    DegenerateStatistics { op: &'static str, count: usize },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tensor container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize], detail: impl Into<String>) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
        detail: detail.into(),
    }
}

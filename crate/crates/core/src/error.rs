use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("NaN produced at node {node} ({op})")]
    NaN { node: usize, op: &'static str },

    #[error("gradient requested for non-scalar node {node} with shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("unbound parameter `{0}`")]
    UnboundParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cholesky factorization failed after retries (final jitter {jitter:e})")]
    Cholesky { jitter: f64 },

    #[error("non-invertible planar flow: {0}")]
    NonInvertibleFlow(String),

    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },

    #[error("non-finite state: {0}")]
    NonFiniteState(String),

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

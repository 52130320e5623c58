use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid occupancy vector: {0}")]
    InvalidState(String),

    #[error("invalid measure: entries sum to {sum}, expected 1")]
    InvalidMeasure { sum: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("step-halving error estimate {estimate:.3e} exceeds tolerance {tolerance:.3e}; try step {suggested:.3e}")]
    RefineStep {
        estimate: f64,
        tolerance: f64,
        suggested: f64,
    },

    #[error("truncation depth too small: closure residual {residual:.3e} at depth {depth}")]
    DepthTooSmall { depth: usize, residual: f64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

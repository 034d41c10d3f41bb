//! Crate-wide error type.

/// Errors surfaced by the library's fallible operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/operation shape disagreement; names the offending primitive.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Input outside an operation's mathematical domain (e.g. log of a
    /// non-positive value).
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Invalid configuration or precondition violation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required (NaN gradient step,
    /// divergent loss).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Checkpoint container problems (missing tensors, precision mismatch).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

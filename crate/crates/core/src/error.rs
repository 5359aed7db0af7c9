use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("parameter id mismatch: missing {missing:?}, extra {extra:?}")]
    ParamMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("importance: {0}")]
    Importance(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged on domain {domain}, epoch {epoch}, step {step}: {reason}")]
    Divergence {
        domain: usize,
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("missing training state: {0}")]
    MissingState(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("layer index {index} out of range for an encoder with {layers} layers")]
    InvalidLayer { index: usize, layers: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },
    #[error("infeasible composition constraints for {0}")]
    Infeasible(String),
    #[error("label variance is zero; R² is undefined")]
    ZeroVariance,
    #[error("Kendall tau is undefined: every pair is tied")]
    AllTied,
    #[error("no rows in {0}")]
    Empty(&'static str),
    #[error("cosine similarity undefined for zero vector at row {0}")]
    ZeroVector(usize),
    #[error("class `{class}` has {got} training rows, need at least {need}")]
    TooFewRows {
        class: &'static str,
        got: usize,
        need: usize,
    },
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        arg,
        reason: reason.into(),
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { context, expected, got })
    }
}

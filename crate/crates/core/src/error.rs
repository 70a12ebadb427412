use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarError>;

pub(crate) fn invalid(msg: impl Into<String>) -> HarError {
    HarError::InvalidParameter(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> HarError {
    HarError::ShapeMismatch(msg.into())
}

pub(crate) fn format_err(what: &'static str, detail: impl Into<String>) -> HarError {
    HarError::Format { what, detail: detail.into() }
}

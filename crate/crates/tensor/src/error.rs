use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate statistics in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        detail: detail.into(),
    })
}

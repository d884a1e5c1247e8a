use std::path::PathBuf;

use seedcloud_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("training diverged at epoch {epoch}, step {step} (batch shapes: {})", batch.join(", "))]
    Diverged { epoch: usize, step: usize, batch: Vec<String> },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    /// Whether the failure stems from how the tool was invoked or configured
    /// rather than from the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Tensor(TensorError::Config(_) | TensorError::Usage(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

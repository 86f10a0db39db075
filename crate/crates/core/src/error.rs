use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = BinoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BinoError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl BinoError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        BinoError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            BinoError::Config(_) | BinoError::Geometry(_) => 2,
            BinoError::Data(_) | BinoError::Io { .. } => 3,
            BinoError::Numerical(_) => 4,
            BinoError::Tensor(TensorError::NonFinite { .. }) => 4,
            BinoError::Tensor(_) => 2,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynafuseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DynafuseError>;

impl DynafuseError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DynafuseError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        DynafuseError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

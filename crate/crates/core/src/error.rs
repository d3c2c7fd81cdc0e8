use byol_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: truncated record at byte offset {offset}")]
    Truncated { path: String, offset: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}; norms: {norms}")]
    Diverged { step: u64, norms: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("unknown config key `{key}`; valid keys: {}", .valid.join(", "))]
    UnknownKey { key: String, valid: Vec<String> },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

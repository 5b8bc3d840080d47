use mgmap_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("planning failed: {0}")]
    Planning(String),

    #[error("non-finite loss term `{term}` at {at}")]
    NonFinite { term: &'static str, at: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint config hash mismatch (checkpoint {found}, expected {expected})")]
    HashMismatch { expected: String, found: String },

    #[error("missing scenes: {}", .0.join(", "))]
    MissingScenes(Vec<String>),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::Tensor(TensorError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

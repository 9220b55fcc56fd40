use thiserror::Error;

#[derive(Debug, Error)]
pub enum MopsError {
    /// Incompatible tensor shapes. Always a programming or configuration bug.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Bad user-supplied data: token ids, labels, empty sets.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },

    #[error("malformed model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MopsError> = std::result::Result<T, E>;

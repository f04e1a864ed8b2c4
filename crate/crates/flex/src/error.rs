//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlexError {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A parameter value is outside its valid domain.
    #[error("parameter error: {0}")]
    Param(String),

    /// A configuration is internally inconsistent or unsupported.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Fusion weights summed below the degeneracy threshold.
    #[error("degenerate weights: sum {sum} below epsilon {eps}")]
    DegenerateWeights { sum: f64, eps: f64 },

    /// Scene generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Persisted state (dataset, checkpoint, report) is malformed.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Command-line level misuse.
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, FlexError>;

impl FlexError {
    /// Process exit code for the CLI: 1 usage, 2 data/config, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            FlexError::Usage(_) => 1,
            FlexError::Numeric(_) | FlexError::DegenerateWeights { .. } => 3,
            _ => 2,
        }
    }
}

use thiserror::Error;

/// Errors raised by the emulator library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("covariance matrix not positive definite (last jitter tried: {jitter:e})")]
    Conditioning { jitter: f64 },

    #[error("fit failed at level {level}: {message}")]
    Fit { level: usize, message: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("unsupported number of levels ({0}); only 2 or 3 levels are supported here")]
    UnsupportedLevels(usize),

    #[error("input outside of the function domain: {0}")]
    Domain(String),

    #[error("simulator failed: {0}")]
    Simulator(String),
}

pub type Result<T> = std::result::Result<T, Error>;

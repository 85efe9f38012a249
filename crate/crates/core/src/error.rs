//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EcfError>;

#[derive(Debug, Error)]
pub enum EcfError {
    /// Operand shapes are incompatible for the named tensor op.
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An op produced NaN or infinity.
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },

    /// A text input failed to parse. Line numbers are 1-based.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Invalid configuration or hyperparameter combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Dataset-level problem (empty after filtering, unknown id, ...).
    #[error("{0}")]
    Data(String),

    /// Model container is unreadable: bad magic, version, or truncation.
    #[error("invalid model file: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

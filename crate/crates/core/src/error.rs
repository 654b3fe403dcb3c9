use thiserror::Error;

/// Errors produced by the adaptation engine.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch at layer {layer} ({name}): expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: usize,
        name: String,
        expected: String,
        actual: String,
    },
    #[error("length mismatch in {context}: left {left}, right {right}")]
    LengthMismatch {
        context: String,
        left: usize,
        right: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stale forward trace: parameters changed since the recorded pass")]
    StaleTrace,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("unknown dataset '{0}' referenced by stream spec")]
    UnknownDataset(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

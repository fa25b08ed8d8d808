use thiserror::Error;

/// Errors produced by the fusion engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The input carries no usable signal (constant image, single-class label map, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("affine transform is not invertible")]
    NonInvertible,

    #[error("no training samples for class {0}")]
    EmptyClass(u8),

    #[error("negative arc capacity {0} in flow network")]
    NegativeCapacity(f64),

    #[error("unsupported or malformed file: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

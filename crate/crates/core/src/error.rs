use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument violates an operation's precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An index is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Configuration failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss; carries diagnostics.
    #[error("training error: {0}")]
    Train(String),

    /// A minimal parent set is not unique on the given context.
    #[error("faithfulness violation: {0}")]
    FaithfulnessViolation(String),

    /// Exhaustive enumeration refused: the domain is too large.
    #[error("enumeration refused: {0}")]
    EnumerationRefused(String),

    /// Checkpoint or system file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

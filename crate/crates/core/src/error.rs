use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A computation produced or received non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A caller violated an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A character id fell outside the embedding table.
    #[error("vocabulary id {id} out of range (size {size})")]
    Vocabulary { id: usize, size: usize },

    /// Invalid encoder/trainer configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary file failed to parse; `offset` is the byte position.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Dataset contents violate a declared invariant.
    #[error("data error: {0}")]
    Data(String),

    /// A vector with (near-)zero norm where a direction is required.
    #[error("degenerate norm: {0}")]
    DegenerateNorm(String),

    /// A probe train/test split is missing a class.
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    /// Correlation of a zero-variance series.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use alloc::string::String;

/// Errors shared by every module in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor or map extents do not line up.
    #[error("{context}: shape mismatch: {detail}")]
    Shape {
        context: &'static str,
        detail: String,
    },
    /// An input carried NaN or infinity where finite values are required.
    #[error("{context}: non-finite values in input")]
    NonFinite { context: &'static str },
    /// A numeric result (typically a training loss) left the finite range.
    #[error("{context}: non-finite result")]
    NumericFailure { context: &'static str },
    /// A parameter is outside its documented range.
    #[error("{context}: {detail}")]
    InvalidParam {
        context: &'static str,
        detail: String,
    },
    /// Malformed text input; `line` is 1-based.
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    /// Malformed or mismatched checkpoint data.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// A training or evaluation call received no usable data.
    #[error("empty dataset")]
    EmptyDataset,
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn shape(context: &'static str, detail: String) -> Self {
        Error::Shape { context, detail }
    }

    pub fn invalid(context: &'static str, detail: String) -> Self {
        Error::InvalidParam { context, detail }
    }
}

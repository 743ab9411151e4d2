use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(alloc::vec::Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("attention row {row} has every key masked")]
    AllKeysMasked { row: usize },
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange { what: &'static str, index: usize, size: usize },
    #[error("label count mismatch: expected {expected}, found {found}")]
    LabelCountMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contingency table has a zero marginal")]
    ZeroMarginal,
    #[error("empty dataset")]
    EmptyDataset,
}

macro_rules! shape_err {
    ($op:expr, $($arg:tt)*) => {
        $crate::error::Error::ShapeMismatch { op: $op, detail: alloc::format!($($arg)*) }
    };
}
pub(crate) use shape_err;

//! Crate-wide error type.

/// Errors raised by tensor ops, model construction, IO and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible operand shapes, named after the operation that rejected them.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed input file (dataset or config) that is not one of the
    /// structured cases below.
    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("unsupported version {found}, this reader supports version {supported}")]
    Version { found: u32, supported: u32 },

    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("unmatched tensor names: {0:?}")]
    UnmatchedNames(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;

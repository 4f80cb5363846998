//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by network construction, bound computation, and IO.
#[derive(Debug, Error)]
pub enum CapmError {
    /// Layer order does not follow the supported conv/maxpool/fc pattern.
    #[error("layer pattern violation at layer {index}: {detail}")]
    PatternViolation { index: usize, detail: String },

    /// A maxpool that is not immediately preceded by a ReLU.
    #[error("maxpool at layer {index} is not preceded by a ReLU")]
    MaxpoolWithoutRelu { index: usize },

    /// Dimensions do not chain or an output size is not integral.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value required to be non-negative was negative.
    #[error("negative input: {0}")]
    NegativeInput(String),

    /// Lower bound exceeds upper bound.
    #[error("inverted bounds: l={lower} > u={upper}")]
    InvertedBounds { lower: f64, upper: f64 },

    /// A crossing interval too narrow to relax safely.
    #[error("degenerate interval: u-l={span} below tolerance")]
    DegenerateInterval { span: f64 },

    /// Corner enumeration requested on too many input dimensions.
    #[error("dimension too large for corner enumeration: {dims} > {max}")]
    DimensionTooLarge { dims: usize, max: usize },

    /// Model or dataset file could not be parsed.
    #[error("parse error: {0}")]
    ParseError(String),

    /// IDX file with an unexpected magic number.
    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    /// IDX file shorter than its header declares.
    #[error("truncated IDX file: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: usize, found: usize },

    /// A class label outside [0, K).
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A dataset with no images.
    #[error("empty dataset")]
    EmptyDataset,

    /// A caller-supplied argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CapmError>;

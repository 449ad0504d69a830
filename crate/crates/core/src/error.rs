//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor kernels, container I/O, grafting, merging,
/// compression, analysis, and the toy trainer.
#[derive(Debug)]
pub enum Error {
    /// Two tensors that must agree in shape do not.
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// Binary kernels require both operands to share an element type.
    DTypeMismatch {
        name: String,
    },
    /// Element count does not match the declared shape.
    DataLength {
        name: String,
        expected: usize,
        got: usize,
    },
    /// A value violated an operation's domain (zero divisor, negative sqrt
    /// operand, non-positive log operand, non-binary mask entry, ...).
    Domain {
        name: String,
        index: usize,
        reason: String,
    },
    /// An operation produced a NaN or infinity.
    NonFinite {
        name: String,
        index: usize,
    },
    /// Top-k selection asked for more elements than exist.
    KOutOfRange {
        k: usize,
        total: usize,
    },
    /// Operation requires a 2-D tensor.
    NotTwoDim {
        name: String,
        shape: Vec<usize>,
    },
    /// Stable rank of the zero matrix is undefined.
    ZeroMatrix {
        name: String,
    },
    /// A tensor expected in a checkpoint or moments container is absent.
    MissingTensor {
        context: String,
        name: String,
    },
    /// Tensor name sets disagree between checkpoints.
    NameSetMismatch {
        context: String,
        detail: String,
    },
    /// Second moments must be elementwise nonnegative.
    NegativeMoment {
        name: String,
        index: usize,
    },
    /// A tensor has both a full and a factored second-moment entry.
    MixedMomentKinds {
        name: String,
    },
    /// Malformed container bytes (bad header, offsets, or dtype).
    Format(String),
    /// Invalid merge recipe or invalid recipe/argument combination.
    Recipe(String),
    /// Toy-trainer failure (divergent loss, non-finite gradient).
    Training(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                name,
                expected,
                got,
            } => write!(
                f,
                "shape mismatch for '{name}': expected {expected:?}, got {got:?}"
            ),
            Error::DTypeMismatch { name } => {
                write!(
                    f,
                    "dtype mismatch for '{name}': operands must share a dtype"
                )
            }
            Error::DataLength {
                name,
                expected,
                got,
            } => write!(
                f,
                "data length mismatch for '{name}': shape implies {expected} elements, got {got}"
            ),
            Error::Domain {
                name,
                index,
                reason,
            } => write!(f, "domain violation in '{name}' at index {index}: {reason}"),
            Error::NonFinite { name, index } => {
                write!(f, "non-finite value in '{name}' at index {index}")
            }
            Error::KOutOfRange { k, total } => {
                write!(f, "top-k count {k} exceeds total element count {total}")
            }
            Error::NotTwoDim { name, shape } => {
                write!(f, "'{name}' must be 2-D, got shape {shape:?}")
            }
            Error::ZeroMatrix { name } => {
                write!(f, "stable rank undefined for zero matrix '{name}'")
            }
            Error::MissingTensor { context, name } => {
                write!(f, "{context}: missing tensor '{name}'")
            }
            Error::NameSetMismatch { context, detail } => {
                write!(f, "name set mismatch ({context}): {detail}")
            }
            Error::NegativeMoment { name, index } => {
                write!(f, "negative second moment in '{name}' at index {index}")
            }
            Error::MixedMomentKinds { name } => write!(
                f,
                "'{name}' has both full and factored second-moment entries"
            ),
            Error::Format(msg) => write!(f, "container format error: {msg}"),
            Error::Recipe(msg) => write!(f, "invalid recipe: {msg}"),
            Error::Training(msg) => write!(f, "training error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension mismatch, naming the offending axis.
    #[error("{op}: axis `{axis}` mismatch: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: shapes {lhs:?} and {rhs:?} are not broadcastable")]
    Broadcast {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: output size must be at least 1, got {h}x{w}")]
    EmptyOutput { op: &'static str, h: usize, w: usize },

    #[error(
        "input resolution {h}x{w} is not divisible by 32; pad the image to the next multiple of 32"
    )]
    Resolution { h: usize, w: usize },

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("parameter `{name}` has no gradient; was backward() run on a graph containing it?")]
    MissingGrad { name: String },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}:{line}: malformed annotation line: {detail}")]
    Annotation {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("duplicate image id `{0}` in evaluation input")]
    DuplicateImageId(String),

    #[error("checkpoint `{path}`: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    ImageDecode { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

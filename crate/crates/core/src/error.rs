use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },

    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("target class {class} out of range (model has {classes} classes)")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("model has no conv layer")]
    NoConvLayer,

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("image: {0}")]
    Image(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("singular system{}", if *.0 { "; use a ridge penalty lambda > 0" } else { "" })]
    Singular(bool),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // The io error is shown inline, not as a source, so chained
    // reporters do not print it twice.
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err: source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

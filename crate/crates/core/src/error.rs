use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph was built without recording; backward is unavailable")]
    NotRecording,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("position ({i}, {j}) is outside the {n_x}x{n_y} patch grid")]
    OutOfGrid {
        i: usize,
        j: usize,
        n_x: usize,
        n_y: usize,
    },

    #[error("unknown slide `{0}`")]
    UnknownSlide(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("empty evaluation: no defined dice score")]
    EmptyEvaluation,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

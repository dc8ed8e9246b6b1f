use std::path::PathBuf;

use crate::SubjectId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// The sensor sampling region left the image (the 5 mm workflow limit).
    #[error("sampling region out of bounds: offset ({dx}, {dy}) px exceeds the {limit} px crop margin or image bounds")]
    Boundary { dx: i64, dy: i64, limit: i64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {left} predictions vs {right} truths")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: validation loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("pre-training pool leaks target subject {target}")]
    Leakage { target: SubjectId },

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

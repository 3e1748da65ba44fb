use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("template construction failed: {0}")]
    Template(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid camera pose: {0}")]
    Camera(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("part {0} selects no cells")]
    EmptyPart(u8),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("malformed OBJ at line {line}: {msg}")]
    Obj { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {last_good:?}")]
    NonFinite {
        iteration: usize,
        last_good: Option<PathBuf>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

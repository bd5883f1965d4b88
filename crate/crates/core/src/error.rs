use std::path::PathBuf;

/// All failure modes surfaced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    #[error("window does not divide the {axis} axis: extent {extent}, window {window}")]
    Window {
        axis: &'static str,
        extent: usize,
        window: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("class index {index} out of range (num_classes = {classes})")]
    ClassIndex { index: usize, classes: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn tape(msg: impl Into<String>) -> Self {
        Error::Tape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced at flat index {index}")]
    NonFinite { op: String, index: usize },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("score set must contain both labels ({0})")]
    SingleLabel(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: {cause}")]
    Train { step: usize, cause: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::FileFormat { path: path.into(), msg: msg.into() }
    }
}

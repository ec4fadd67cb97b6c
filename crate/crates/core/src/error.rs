use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error in {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("invalid sequence {path}: {msg}")]
    Sequence { path: PathBuf, msg: String },
    #[error("annotation error: {0}")]
    Annotation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable token identifying the error class, used by the CLI's
    /// machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Sequence { .. } => "sequence",
            Error::Annotation(_) => "annotation",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::Eval(_) => "eval",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

/// Errors surfaced by the core library, grouped by what went wrong rather
/// than by which module raised them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category label used by the CLI to pick an exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Io { .. } | Error::Format { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

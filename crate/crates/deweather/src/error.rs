use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for validation problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidGeometry(_)
            | Error::UnsupportedGeometry(_)
            | Error::InvalidConfig(_)
            | Error::InvalidInput(_) => 2,
            _ => 1,
        }
    }
}

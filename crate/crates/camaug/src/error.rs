use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
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

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing mask for image {0}")]
    MissingMask(PathBuf),

    #[error("cannot parse patient id from {0}")]
    PatientId(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("saliency cache error: {0}")]
    Cache(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI: protocol violations are distinguished so
    /// harness scripts can tell a broken experiment from a broken input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Protocol(_) => 3,
            _ => 1,
        }
    }
}

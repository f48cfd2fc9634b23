use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("class id {class_id} out of range (net has {count} classes)")]
    ClassOutOfRange { class_id: usize, count: usize },

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("dataset format: {0}")]
    Dataset(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("missing prerequisite {what}: {path}")]
    MissingPrerequisite { what: &'static str, path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

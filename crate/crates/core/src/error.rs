use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no such file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: byte offset {offset}: {detail}")]
    Data {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("checkpoint: byte offset {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("training diverged (loss is not finite) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("model predicts {model} classes but dataset has {data}")]
    ClassMismatch { model: usize, data: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

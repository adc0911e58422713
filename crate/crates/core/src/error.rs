use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { expected: u8, found: u8 },

    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("invalid motion sequence: {0}")]
    InvalidSequence(String),

    #[error("cannot downsample {from} fps to {to} fps: rates are not an integer multiple")]
    NonDivisibleRate { from: u32, to: u32 },

    #[error("{ms} ms is not a horizon at {fps} fps; valid horizons are multiples of {period} ms: {valid:?}")]
    InvalidHorizon {
        ms: u32,
        fps: u32,
        period: u32,
        valid: Vec<u32>,
    },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    IncompatibleTensor {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {reason}")]
    WavDecode { path: PathBuf, reason: String },

    #[error("unsupported wav format in {path}: {reason}")]
    WavUnsupported { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("class `{class}` has {have} clips but needs more than {need}")]
    InsufficientData {
        class: String,
        have: usize,
        need: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error in {stage}: {detail}")]
    Shape { stage: String, detail: String },

    #[error("{0}")]
    EmptySet(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity failure: {0}")]
    CheckpointIntegrity(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("feature dump error: {0}")]
    FeatureDump(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {message} (off-diagonal residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    #[error("training failed at {stage}: {message}")]
    Training { stage: String, message: String },

    #[error("missing artifact for stage `{stage}`: {message}")]
    Orchestration { stage: String, message: String },

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("config error: {0}")]
    Config(String),
}

/// Validation failures raised while decoding a USUB container.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"USUB\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("header truncated: need {needed} bytes, file has {available}")]
    TruncatedHeader { needed: u64, available: u64 },

    #[error("manifest bounds violated: {0}")]
    ManifestBounds(String),

    #[error("shape mismatch for tensor `{name}`: {message}")]
    ShapeMismatch { name: String, message: String },

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("object kind mismatch: file holds `{found}`, expected `{expected}`")]
    WrongKind { found: String, expected: String },

    #[error("non-finite value in tensor `{name}`")]
    NonFinite { name: String },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

//! Crate-wide error type.
//!
//! Numeric failures (NaN/Inf) are surfaced as errors at the operation that
//! produced them rather than propagated through downstream math; the adaptive
//! loss weighting depends on loss values being trustworthy.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad magic: not a DDIT1 container")]
    BadMagic,

    #[error("unsupported container version 0x{0:02x}")]
    UnsupportedVersion(u8),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("tensor {0:?} missing from container")]
    MissingTensor(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 2 for config/usage problems, 3 for
    /// numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::Json(_)
            | Error::BadMagic
            | Error::UnsupportedVersion(_)
            | Error::Truncated(_)
            | Error::MalformedManifest(_)
            | Error::MissingTensor(_) => 2,
            Error::NonFinite { .. } | Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

use std::io;

use thiserror::Error;

/// Errors produced by the estimator toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("threshold {t} outside supported range [0, {t_max}]")]
    OutOfRange { t: f64, t_max: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("row {0} not found")]
    NotFound(usize),

    #[error("bad file magic: expected {expected:?}")]
    BadMagic { expected: [u8; 4] },

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

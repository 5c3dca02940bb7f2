use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the quantization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input value {0}")]
    NonFinite(f64),

    #[error("input is empty")]
    Empty,

    #[error("target maximum must be positive and finite, got {0}")]
    InvalidTargetMax(f64),

    #[error("length mismatch: original has {original} values, quantized block has {quantized}")]
    LengthMismatch { original: usize, quantized: usize },

    #[error("block size must be at least 1")]
    InvalidBlockSize,

    #[error("unknown {kind} `{value}`")]
    UnknownName { kind: &'static str, value: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid mask range [{lower}, {upper})")]
    InvalidMask { lower: f64, upper: f64 },

    #[error("region {region} exemplar sigma={sigma} failed validation: {reason}; recalibrate the exemplar")]
    RegionValidation {
        region: char,
        sigma: f64,
        reason: String,
    },

    #[error("malformed npy file {path}: {reason}")]
    Npy { path: PathBuf, reason: String },

    #[error("plotting {csv} failed: {reason}")]
    Plot { csv: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(&v) => Err(Error::NonFinite(v)),
        None => Ok(()),
    }
}

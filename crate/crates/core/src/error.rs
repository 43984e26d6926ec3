use thiserror::Error;

use crate::linearize::LinearizabilityReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid range: min {min} > max {max}")]
    InvalidRange { min: f32, max: f32 },

    #[error("network is not linearizable: {0}")]
    NotLinearizable(LinearizabilityReport),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("wav error: {0}")]
    Wav(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Prefix a shape or config error with the layer it came from.
    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::Shape(m) => Error::Shape(format!("{layer}: {m}")),
            Error::Config(m) => Error::Config(format!("{layer}: {m}")),
            other => other,
        }
    }
}

/// Model file errors. Each failure mode is its own variant so callers can
/// tell a corrupt header from a truncated payload.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected \"LCN1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error(
        "truncated model file: needed {needed} bytes at offset {offset}, {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("tensor {name}: manifest declares {declared} bytes but shape {shape:?} of {dtype} needs {expected}")]
    ByteLength {
        name: String,
        shape: Vec<usize>,
        dtype: String,
        declared: usize,
        expected: usize,
    },

    #[error("trailing data: {0} bytes after the last tensor")]
    TrailingBytes(usize),

    #[error("manifest: {0}")]
    Manifest(String),
}

use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum QcnnError {
    /// Tensor shapes or layer geometry do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A quantization or network configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric value was NaN or infinite where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file did not follow the expected binary or text format.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(
        "truncated blob `{name}`: needs {needed} bytes at offset {offset}, file has {available}"
    )]
    TruncatedBlob {
        name: String,
        offset: u64,
        needed: u64,
        available: u64,
    },

    #[error("checksum mismatch for blob `{name}`: manifest {expected:08x}, data {actual:08x}")]
    Checksum {
        name: String,
        expected: u32,
        actual: u32,
    },

    #[error("training error: {0}")]
    Training(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl QcnnError {
    /// Prefixes the message with the offending layer, keeping the variant
    /// for message-carrying errors.
    pub fn in_layer(self, name: &str) -> Self {
        let tag = |m: String| format!("layer `{name}`: {m}");
        match self {
            QcnnError::Dimension(m) => QcnnError::Dimension(tag(m)),
            QcnnError::Config(m) => QcnnError::Config(tag(m)),
            QcnnError::NonFinite(m) => QcnnError::NonFinite(tag(m)),
            QcnnError::Format(m) => QcnnError::Format(tag(m)),
            QcnnError::Training(m) => QcnnError::Training(tag(m)),
            other => other,
        }
    }
}

pub type Result<T, E = QcnnError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(QcnnError::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(QcnnError::Config(msg.into()))
}

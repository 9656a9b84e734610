use std::io;

use thiserror::Error;

pub type Result<T, E = CftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CftError {
    /// Extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value went NaN or infinite.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    /// RGB and thermal images of one pair disagree in extent.
    #[error("modality alignment error: rgb is {rgb_w}x{rgb_h}, thermal is {thermal_w}x{thermal_h}")]
    Alignment {
        rgb_w: usize,
        rgb_h: usize,
        thermal_w: usize,
        thermal_h: usize,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CftError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        CftError::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CftError::Contract(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        CftError::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        CftError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

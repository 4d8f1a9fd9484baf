use thiserror::Error;

use crate::hierarchy::GaussianId;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("timestamp {t} outside [0, {duration}]")]
    OutOfRange { t: f64, duration: f64 },

    #[error("unknown gaussian id {0}")]
    NotFound(GaussianId),

    #[error("hierarchy audit failed: {0}")]
    Audit(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

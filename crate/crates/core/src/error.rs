use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum CrmError {
    /// A shape-level precondition was violated (mismatched operands,
    /// wrong channel count, invalid extents).
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument-level precondition was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric failure: non-finite loss or gradient.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("invalid checkpoint format: {0}")]
    BadMagic(String),

    /// Checkpoint version is not supported by this build.
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    /// Checkpoint file is shorter than its footer claims.
    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    /// A mask or image file had the wrong pixel layout.
    #[error("bad image data in {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },

    /// Corpus directory problems: empty, duplicate stems, missing files.
    #[error("corpus error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = CrmError> = std::result::Result<T, E>;

impl CrmError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CrmError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CrmError::InvalidArgument(msg.into())
    }
}

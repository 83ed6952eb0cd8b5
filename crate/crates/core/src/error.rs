use std::io;

use thiserror::Error;

/// Errors produced by the ensemble library.
#[derive(Debug, Error)]
pub enum CteError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image {width}x{height} is too small: {reason}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        reason: String,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("patch at ({x}, {y}) does not fit inside the image")]
    PatchOutOfBounds { x: usize, y: usize },

    #[error("bit function reads channel {channel} of kind {kind}, which it cannot use")]
    ChannelKindMismatch { channel: usize, kind: String },

    #[error("invalid bit function: {0}")]
    InvalidBitFunction(String),

    #[error("invalid tree structure: {0}")]
    InvalidTree(String),

    #[error("class {0} has no examples")]
    EmptyClass(usize),

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("invalid teacher soft labels: {0}")]
    InvalidTeacher(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("unsupported model format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = CteError> = std::result::Result<T, E>;

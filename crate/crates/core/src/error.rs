//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum OccError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("view index {index} out of range ({views} views)")]
    ViewIndexOutOfRange { index: usize, views: usize },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("placement overflow: requested {requested} of class {class}, placed {placed}")]
    PlacementOverflow {
        class: u8,
        requested: u32,
        placed: u32,
    },
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("unknown token id {0}")]
    UnknownToken(u16),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    FormatError(String),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("config hash mismatch: checkpoint {expected}, current {actual}")]
    ConfigHashMismatch { expected: String, actual: String },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("covariance not positive semidefinite (eigenvalue {0})")]
    NonPsd(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OccError>;

impl OccError {
    /// Process exit code: 2 invalid input, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        use OccError::*;
        match self {
            ShapeMismatch(_) | DomainError(_) | IndexOutOfRange { .. }
            | ViewIndexOutOfRange { .. } | InvalidRange(_) | PlacementOverflow { .. }
            | DegenerateCamera(_) | UnknownToken(_) | InvalidSpec(_) | InvalidConfig(_)
            | InsufficientSamples { .. } => 2,
            NonFiniteValue(_) | NonFiniteLoss { .. } | NonPsd(_) => 3,
            FormatError(_) | VersionMismatch(_) | ConfigHashMismatch { .. } | Io(_) => 4,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> OccError {
    OccError::ShapeMismatch(msg.into())
}

//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not chain.
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    /// Invalid configuration (divisibility, mask extents, bad flags, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation only defined for the simple conv/pool/dense model class.
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    /// Division guard tripped (e.g. ablation weights with a near-zero logit).
    #[error("division guard: |{value:e}| below {threshold:e}")]
    DivisionGuard { value: f64, threshold: f64 },

    /// A computation produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    /// The model has no masked layer, so no dead zone exists.
    #[error("model has no masked dense layer: no dead zone")]
    NoDeadZone,

    /// IDX file with an unexpected magic number.
    #[error("bad IDX magic {found:#010x}: expected 0x00000803 (images) or 0x00000801 (labels)")]
    BadMagic { found: u32 },

    /// File shorter than its header declares.
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    /// Declared dimensions overflow the addressable size.
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    /// Malformed image or checkpoint data.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 numeric/verification, 2 shape/config, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::Config(_)
            | Error::UnsupportedArchitecture(_)
            | Error::NoDeadZone => 2,
            Error::DivisionGuard { .. } | Error::NonFinite(_) | Error::Diverged { .. } => 1,
            Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::DimensionOverflow(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
        }
    }
}

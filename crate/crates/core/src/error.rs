use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("row {0} has zero norm and cannot be unit-normalized")]
    ZeroRow(usize),

    #[error("matrix must have at least one row and one column (got {rows}x{cols})")]
    Empty { rows: usize, cols: usize },

    #[error("normalized activation out of [0, 1] at latent {latent}, sample {sample}: {value}")]
    NotNormalized {
        latent: usize,
        sample: usize,
        value: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),

    #[error("label file: {0}")]
    Labels(String),

    #[error("could not place {wanted} cluster centers in dimension {dim} after {attempts} attempts")]
    CenterSampling {
        wanted: usize,
        dim: usize,
        attempts: usize,
    },

    #[error("R² needs at least 2 samples, got {0}")]
    TooFewSamples(u64),

    #[error("every target dimension has zero variance")]
    AllZeroVariance,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    /// True for failures caused by numerics (NaN/Inf) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

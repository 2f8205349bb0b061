use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum KamError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at grid point {index} ({detail})")]
    NonFinite { index: usize, detail: String },

    /// A small divisor fell below the float-noise floor, or a non-resonance
    /// check failed for the reported pair.
    #[error("resonant divisor at k={k:?}, m={m:?} (|d| = {magnitude:e})")]
    Resonant { k: Vec<i64>, m: Vec<i64>, magnitude: f64 },

    #[error("hypothesis not satisfied: {0}")]
    Inapplicable(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KamError>;

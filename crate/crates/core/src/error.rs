//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A time or duration does not sit on the expected uniform grid.
    #[error("grid alignment: {0}")]
    GridAlignment(String),

    /// Vector dimensions disagree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Two paths cannot be combined (different step, start, or coverage).
    #[error("incompatible paths: {0}")]
    IncompatiblePaths(String),

    /// A path was queried past its last node.
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    /// Invalid problem data or configuration.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The backward march or a simulated state left the representable range.
    #[error("numerical blow-up at t = {t}: {what}")]
    BlowUp { t: f64, what: String },

    /// A linear system that the oracle must solve exactly is singular.
    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

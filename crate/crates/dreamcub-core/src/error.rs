//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dialogue history would exceed its 2·T_max capacity.
    #[error("history capacity exceeded: {0}")]
    Capacity(String),

    /// An operation was applied to an object in the wrong state
    /// (e.g. stepping a finished episode).
    #[error("state error: {0}")]
    State(String),

    /// Observed evidence has probability zero under the spec tables.
    #[error("impossible evidence: {0}")]
    ImpossibleEvidence(String),

    /// A documented precondition was violated (empty batch, empty buffer, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A non-finite number reached a computation that requires finite inputs.
    #[error("numeric error: {0}")]
    NonFinite(String),

    /// A fixed-point iteration failed to converge within its iteration cap.
    /// Carries the last iterate for inspection.
    #[error("no convergence after {iters} iterations (max change {max_change:.3e})")]
    Convergence {
        iters: usize,
        max_change: f64,
        last: Vec<f64>,
    },

    /// Pearson correlation is undefined (zero variance in an input).
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A serialized artifact or dataset failed validation.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Dataset parse failure with per-line diagnostics.
    #[error("dataset parse failed: {}", .0.join("; "))]
    DatasetParse(Vec<String>),

    /// An internal invariant was violated (e.g. the environment stepped
    /// during imagination-only behavior learning).
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value.
    #[error("config: {0}")]
    Config(String),

    /// Mismatched vector or matrix dimensions.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Numerical failure (non-finite values, factorization breakdown).
    #[error("numeric: {0}")]
    Numeric(String),

    /// Received-signal framing does not match the expected block layout.
    #[error("framing: {0}")]
    Framing(String),

    /// All-zero signal cannot be power-scaled.
    #[error("degenerate signal: zero norm, device skips this round")]
    DegenerateSignal,

    /// Closed-form expression evaluated outside its validity region.
    #[error("domain: {0}")]
    Domain(String),

    /// Dataset cannot be split as requested.
    #[error("partition: {0}")]
    Partition(String),

    /// Malformed IDX dataset file.
    #[error("idx parse: {0}")]
    Idx(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Multiply counters for complexity accounting.
//!
//! Reconstruction code adds coarse exact per-call totals (a matrix-vector
//! product adds rows*cols, a Cholesky factorization adds n^3/6, ...) so a
//! whole-round count can be compared against closed-form operation budgets.

use std::sync::atomic::{AtomicU64, Ordering};

/// Thread-safe multiply/divide tally.
#[derive(Debug, Default)]
pub struct OpCounter {
    mults: AtomicU64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `n` multiplies (divides count the same).
    #[inline]
    pub fn add(&self, n: u64) {
        self.mults.fetch_add(n, Ordering::Relaxed);
    }

    pub fn total(&self) -> u64 {
        self.mults.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.mults.store(0, Ordering::Relaxed);
    }
}

//! Communication-efficient federated learning over a MIMO multiple-access uplink.
//!
//! Devices compress local gradients (error feedback + per-block top-S
//! sparsification + Gaussian random projection + power scaling) and transmit
//! them simultaneously over a block-fading multi-antenna channel. The server
//! recovers the global gradient with a turbo loop that alternates per-resource
//! MMSE detection with per-device EM-GAMP sparse estimation, exchanging
//! extrinsic beliefs. Greedy baselines (LMMSE+OMP, 2D-OMP, Kronecker OMP),
//! closed-form error/convergence bounds, and an end-to-end image-classification
//! harness round out the crate.

// validation uses negated comparisons on purpose so NaN is rejected too, and
// the math code prefers indexed loops that mirror the formulas
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod baselines;
pub mod channel;
pub mod compression;
pub mod count;
pub mod detection;
pub mod error;
pub mod fl;
pub mod gamp;
pub mod numeric;
pub mod streams;
pub mod turbo;

pub use error::{Error, Result};

//! Deterministic random substreams.
//!
//! Every random object in a run is drawn from its own ChaCha stream keyed by
//! SHA-256 over (global seed, label, integer ids). Substreams are independent
//! of evaluation order, so parallel code reproduces serial results bit for
//! bit, and both ends of the link regenerate identical shared randomness
//! (e.g. the projection matrix) from (seed, "A", round).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Stream labels used by the simulator.
pub mod label {
    /// Per-round random projection matrix, shared by devices and server.
    pub const PROJECTION: &str = "A";
    /// Per-round channel matrix.
    pub const CHANNEL: &str = "H";
    /// Receiver noise, one stream per (round, resource).
    pub const NOISE: &str = "z";
    /// Reconstruction starting point, one stream per (round, device, block).
    pub const GAMP_INIT: &str = "g0";
    /// Model weight initialization.
    pub const WEIGHT_INIT: &str = "w0";
    /// Shared block permutation of gradient indices.
    pub const PARTITION: &str = "part";
    /// Synthetic dataset generation.
    pub const DATASET: &str = "data";
    /// Per-device training-sample draw.
    pub const DEVICE_SAMPLES: &str = "devsamp";
    /// Per-round per-device mini-batch draw.
    pub const BATCH: &str = "batch";
    /// Per-round per-device downlink perturbation.
    pub const DOWNLINK: &str = "dl";
    /// Synthetic gradient draws, one stream per (round, device, block).
    pub const SYNTH_GRAD: &str = "syng";
}

/// Derives an independent ChaCha stream from (seed, label, ids).
pub fn substream(seed: u64, label: &str, ids: &[u64]) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for &id in ids {
        h.update(id.to_le_bytes());
    }
    let key: [u8; 32] = h.finalize().into();
    ChaCha12Rng::from_seed(key)
}

/// Fills a slice with IID standard normal draws.
pub fn fill_standard_normal(rng: &mut ChaCha12Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Convenience: a fresh standard normal vector from a substream.
pub fn standard_normal_vec(seed: u64, lbl: &str, ids: &[u64], len: usize) -> Vec<f64> {
    let mut rng = substream(seed, lbl, ids);
    let mut v = vec![0.0; len];
    fill_standard_normal(&mut rng, &mut v);
    v
}

//! Device-side gradient compression.
//!
//! The error-compensated gradient is split into B equal blocks (zero-padded
//! if needed), each block keeps its S largest-magnitude entries, and every
//! kept block is projected to a short vector through a shared per-round
//! Gaussian matrix. The concatenated projection is scaled to unit average
//! power before transmission; dropped mass stays in the device residual.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numeric::norm_sq;
use crate::streams::{self, label};

/// Static compression geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionConfig {
    /// Gradient dimension before padding.
    pub total_dim: usize,
    /// Number of blocks B.
    pub num_blocks: usize,
    /// Compression ratio R = block dim / measurement dim.
    pub ratio: f64,
    /// Fraction of entries kept per block.
    pub sparsity_ratio: f64,
}

impl CompressionConfig {
    pub fn new(
        total_dim: usize,
        num_blocks: usize,
        ratio: f64,
        sparsity_ratio: f64,
    ) -> Result<Self> {
        let cfg = Self {
            total_dim,
            num_blocks,
            ratio,
            sparsity_ratio,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.total_dim == 0 || self.num_blocks == 0 {
            return Err(Error::Config("total_dim and num_blocks must be >= 1".into()));
        }
        if !(self.ratio >= 1.0) {
            return Err(Error::Config(format!("ratio must be >= 1, got {}", self.ratio)));
        }
        if !(self.sparsity_ratio > 0.0 && self.sparsity_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "sparsity_ratio must lie in (0, 1], got {}",
                self.sparsity_ratio
            )));
        }
        if self.measure_dim() == 0 {
            return Err(Error::Config(format!(
                "block dim {} with ratio {} leaves no measurements",
                self.block_dim(),
                self.ratio
            )));
        }
        if self.sparsity() == 0 {
            return Err(Error::Config(format!(
                "sparsity_ratio {} keeps no entries of a {}-dim block",
                self.sparsity_ratio,
                self.block_dim()
            )));
        }
        Ok(())
    }

    /// Gradient dimension after zero-padding to a multiple of B.
    pub fn padded_dim(&self) -> usize {
        self.total_dim.div_ceil(self.num_blocks) * self.num_blocks
    }

    /// Per-block dimension N.
    pub fn block_dim(&self) -> usize {
        self.padded_dim() / self.num_blocks
    }

    /// Per-block measurement dimension M = floor(N / R).
    pub fn measure_dim(&self) -> usize {
        (self.block_dim() as f64 / self.ratio).floor() as usize
    }

    /// Entries kept per block, S = floor(sparsity_ratio * N).
    pub fn sparsity(&self) -> usize {
        (self.sparsity_ratio * self.block_dim() as f64).floor() as usize
    }

    /// Total transmitted dimension per device.
    pub fn total_measure_dim(&self) -> usize {
        self.num_blocks * self.measure_dim()
    }
}

/// Disjoint index sets mapping padded gradient positions to blocks; shared by
/// every device so simultaneously transmitted blocks cover the same indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    sets: Vec<Vec<usize>>,
}

impl BlockPartition {
    /// Consecutive index ranges, block b covering [b*N, (b+1)*N).
    pub fn contiguous(cfg: &CompressionConfig) -> Self {
        let n = cfg.block_dim();
        let sets = (0..cfg.num_blocks)
            .map(|b| (b * n..(b + 1) * n).collect())
            .collect();
        Self { sets }
    }

    /// Seeded random permutation of the padded indices, split consecutively.
    pub fn permuted(cfg: &CompressionConfig, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..cfg.padded_dim()).collect();
        let mut rng = streams::substream(seed, label::PARTITION, &[]);
        idx.shuffle(&mut rng);
        let n = cfg.block_dim();
        let sets = (0..cfg.num_blocks)
            .map(|b| idx[b * n..(b + 1) * n].to_vec())
            .collect();
        Self { sets }
    }

    pub fn num_blocks(&self) -> usize {
        self.sets.len()
    }

    pub fn index_set(&self, b: usize) -> &[usize] {
        &self.sets[b]
    }
}

/// Per-device compression state carried across rounds.
#[derive(Debug, Clone)]
pub struct CompressionState {
    /// Accumulated sparsification error, added to the next local gradient.
    pub residual: Vec<f64>,
    /// Power factor of the last transmitted signal, if any.
    pub power: Option<f64>,
}

impl CompressionState {
    pub fn new(total_dim: usize) -> Self {
        Self {
            residual: vec![0.0; total_dim],
            power: None,
        }
    }
}

/// Splits an error-compensated gradient into blocks, keeps the S
/// largest-magnitude entries of each (ties: lower index wins), and stores the
/// dropped entries in the residual. Kept entries are copied verbatim and
/// dropped positions move to the residual unchanged, so
/// concatenate(blocks) + residual == input exactly.
pub fn block_sparsify(
    g_bar: &[f64],
    state: &mut CompressionState,
    part: &BlockPartition,
    s: usize,
) -> Vec<Vec<f64>> {
    let total = g_bar.len();
    state.residual.clone_from(&g_bar.to_vec());
    let mut blocks = Vec::with_capacity(part.num_blocks());
    let mut order: Vec<usize> = Vec::new();
    for b in 0..part.num_blocks() {
        let set = part.index_set(b);
        let n = set.len();
        let mut block = vec![0.0; n];
        order.clear();
        order.extend(0..n);
        let value = |j: usize| {
            let gi = set[j];
            if gi < total {
                g_bar[gi]
            } else {
                0.0
            }
        };
        // magnitude descending, ties broken toward the lower in-block index
        order.sort_unstable_by(|&a, &b| {
            value(b)
                .abs()
                .partial_cmp(&value(a).abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(s.min(n)) {
            block[j] = value(j);
            if set[j] < total {
                state.residual[set[j]] = 0.0;
            }
        }
        blocks.push(block);
    }
    blocks
}

/// Shared Gaussian projection with entries IID N(0, 1/M).
#[derive(Debug, Clone)]
pub struct MeasurementMatrix {
    a: DMatrix<f64>,
    a_sq: DMatrix<f64>,
}

impl MeasurementMatrix {
    /// Regenerates the round-t projection from the shared stream
    /// (seed, "A", t); entries are drawn in column-major order.
    pub fn generate(seed: u64, round: u64, m: usize, n: usize) -> Self {
        let mut rng = streams::substream(seed, label::PROJECTION, &[round]);
        let mut data = vec![0.0; m * n];
        streams::fill_standard_normal(&mut rng, &mut data);
        let scale = (1.0 / m as f64).sqrt();
        for v in data.iter_mut() {
            *v *= scale;
        }
        Self::from_matrix(DMatrix::from_vec(m, n, data))
    }

    /// Wraps an explicit matrix (tests, baselines on custom operators).
    pub fn from_matrix(a: DMatrix<f64>) -> Self {
        let a_sq = a.map(|v| v * v);
        Self { a, a_sq }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Column n as a contiguous slice.
    #[inline]
    pub fn col(&self, n: usize) -> &[f64] {
        let m = self.a.nrows();
        &self.a.as_slice()[n * m..(n + 1) * m]
    }

    /// Column n of the entrywise square, precomputed once.
    #[inline]
    pub fn col_sq(&self, n: usize) -> &[f64] {
        let m = self.a_sq.nrows();
        &self.a_sq.as_slice()[n * m..(n + 1) * m]
    }
}

/// Projects one sparse block: x = A g, accumulated over the nonzero entries.
pub fn compress_block(g_b: &[f64], a: &MeasurementMatrix) -> Result<Vec<f64>> {
    if g_b.len() != a.cols() {
        return Err(Error::Dimension {
            what: "compress_block input",
            expected: a.cols(),
            got: g_b.len(),
        });
    }
    let mut x = vec![0.0; a.rows()];
    for (n, &g) in g_b.iter().enumerate() {
        if g != 0.0 {
            for (xi, &ai) in x.iter_mut().zip(a.col(n)) {
                *xi += ai * g;
            }
        }
    }
    Ok(x)
}

/// Scales the stacked projection to average power one: P = M_bar / ||x||^2,
/// output sqrt(P) x. An all-zero input cannot be scaled and the device skips
/// the round.
pub fn power_scale(x: &[f64], m_bar: usize) -> Result<(Vec<f64>, f64)> {
    let nsq = norm_sq(x);
    if nsq == 0.0 {
        return Err(Error::DegenerateSignal);
    }
    let p = m_bar as f64 / nsq;
    let scale = p.sqrt();
    Ok((x.iter().map(|v| v * scale).collect(), p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize, b: usize, r: f64, sr: f64) -> CompressionConfig {
        CompressionConfig::new(total, b, r, sr).unwrap()
    }

    #[test]
    fn geometry_at_reference_point() {
        let c = cfg(15910, 10, 5.0, 0.04);
        assert_eq!(c.padded_dim(), 15910);
        assert_eq!(c.block_dim(), 1591);
        assert_eq!(c.measure_dim(), 318);
        assert_eq!(c.sparsity(), 63);
        assert_eq!(c.total_measure_dim(), 3180);
    }

    #[test]
    fn geometry_with_padding() {
        let c = cfg(10, 3, 2.0, 0.5);
        assert_eq!(c.padded_dim(), 12);
        assert_eq!(c.block_dim(), 4);
        assert_eq!(c.measure_dim(), 2);
        assert_eq!(c.sparsity(), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(CompressionConfig::new(0, 1, 2.0, 0.5).is_err());
        assert!(CompressionConfig::new(10, 1, 0.5, 0.5).is_err());
        assert!(CompressionConfig::new(10, 1, 2.0, 0.0).is_err());
        assert!(CompressionConfig::new(10, 1, 2.0, 1.5).is_err());
        // S = floor(0.04 * 4) = 0
        assert!(CompressionConfig::new(8, 2, 2.0, 0.04).is_err());
    }

    #[test]
    fn partition_is_disjoint_cover() {
        let c = cfg(10, 3, 2.0, 0.5);
        for part in [
            BlockPartition::contiguous(&c),
            BlockPartition::permuted(&c, 9),
        ] {
            let mut seen = vec![false; c.padded_dim()];
            for b in 0..part.num_blocks() {
                for &i in part.index_set(b) {
                    assert!(!seen[i]);
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
        assert_eq!(
            BlockPartition::permuted(&c, 9),
            BlockPartition::permuted(&c, 9)
        );
        assert_ne!(
            BlockPartition::permuted(&c, 9),
            BlockPartition::contiguous(&c)
        );
    }

    #[test]
    fn sparsify_keeps_top_entries() {
        let c = cfg(4, 1, 1.0, 0.5);
        let part = BlockPartition::contiguous(&c);
        let mut st = CompressionState::new(4);
        let blocks = block_sparsify(&[0.5, -2.0, 0.0, 1.5], &mut st, &part, c.sparsity());
        assert_eq!(blocks[0], vec![0.0, -2.0, 0.0, 1.5]);
        assert_eq!(st.residual, vec![0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sparsify_ties_go_to_lower_index() {
        let c = cfg(4, 1, 1.0, 0.5);
        let part = BlockPartition::contiguous(&c);
        let mut st = CompressionState::new(4);
        let blocks = block_sparsify(&[1.0, -1.0, 1.0, 0.0], &mut st, &part, 2);
        assert_eq!(blocks[0], vec![1.0, -1.0, 0.0, 0.0]);
        assert_eq!(st.residual, vec![0.0, 0.0, 1.0, 0.0]);
    }

    // brute force: among all supports of size S maximizing the kept magnitude,
    // the lexicographically smallest index set
    fn oracle_support(v: &[f64], s: usize) -> Vec<usize> {
        let n = v.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != s {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let score: f64 = idx.iter().map(|&i| v[i].abs()).sum();
            let better = match &best {
                None => true,
                Some((bs, bi)) => score > bs + 1e-12 || ((score - bs).abs() <= 1e-12 && idx < *bi),
            };
            if better {
                best = Some((score, idx));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn sparsify_matches_exhaustive_tiebreak_oracle() {
        let c = cfg(4, 1, 1.0, 0.5);
        let part = BlockPartition::contiguous(&c);
        let vals = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for a in vals {
            for b in vals {
                for x in vals {
                    for y in vals {
                        let v = [a, b, x, y];
                        let mut st = CompressionState::new(4);
                        let blocks = block_sparsify(&v, &mut st, &part, 2);
                        let got: Vec<usize> =
                            (0..4).filter(|&i| blocks[0][i] != 0.0).collect();
                        let want: Vec<usize> = oracle_support(&v, 2)
                            .into_iter()
                            .filter(|&i| v[i] != 0.0)
                            .collect();
                        assert_eq!(got, want, "input {v:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn conservation_is_exact() {
        use rand::Rng;
        let mut rng = streams::substream(5, "test", &[]);
        for &total in &[4usize, 64, 1591] {
            let blocks_n = if total == 4 { 1 } else { 10 };
            let c = cfg(total, blocks_n, 2.0, 0.3);
            for part in [
                BlockPartition::contiguous(&c),
                BlockPartition::permuted(&c, 1),
            ] {
                for _ in 0..20 {
                    let g: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let mut st = CompressionState::new(total);
                    let blocks = block_sparsify(&g, &mut st, &part, c.sparsity());
                    let mut recon = st.residual.clone();
                    for (b, blk) in blocks.iter().enumerate() {
                        for (j, &i) in part.index_set(b).iter().enumerate() {
                            if i < total {
                                recon[i] += blk[j];
                            } else {
                                assert_eq!(blk[j], 0.0);
                            }
                        }
                    }
                    assert_eq!(recon, g, "bitwise conservation");
                    for blk in &blocks {
                        assert!(blk.iter().filter(|&&v| v != 0.0).count() <= c.sparsity());
                    }
                }
            }
        }
    }

    #[test]
    fn measurement_matrix_stats_and_determinism() {
        let (m, n) = (200, 1000);
        let a = MeasurementMatrix::generate(11, 3, m, n);
        let b = MeasurementMatrix::generate(11, 3, m, n);
        assert_eq!(a.matrix(), b.matrix());
        let other = MeasurementMatrix::generate(11, 4, m, n);
        assert_ne!(a.matrix(), other.matrix());

        let flat = a.matrix().as_slice();
        let len = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / len;
        let var = flat.iter().map(|v| v * v).sum::<f64>() / len - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let target = 1.0 / m as f64;
        assert!((var - target).abs() < 0.02 * target, "var {var}");
    }

    #[test]
    fn compress_block_is_a_projection() {
        let a = MeasurementMatrix::from_matrix(DMatrix::from_row_slice(
            2,
            3,
            &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0],
        ));
        let x = compress_block(&[1.0, 0.0, -1.0], &a).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
        assert!(compress_block(&[1.0, 0.0], &a).is_err());
    }

    #[test]
    fn power_scale_normalizes_average_power() {
        let (x, p) = power_scale(&[3.0, 4.0], 2).unwrap();
        assert!((p - 0.08).abs() < 1e-15);
        let ms = norm_sq(&x) / x.len() as f64;
        assert!((ms - 1.0).abs() < 1e-12);
        assert!(matches!(
            power_scale(&[0.0, 0.0], 2),
            Err(Error::DegenerateSignal)
        ));
    }
}

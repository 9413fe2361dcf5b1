//! MIMO multiple-access channel simulation.
//!
//! K single-antenna devices transmit simultaneously to a U-antenna receiver
//! over a real-valued block-fading channel: y[m] = H s[m] + z[m] with
//! z ~ N(0, sigma^2 I). The channel is redrawn independently every round and
//! the receiver groups resources into per-block observation matrices.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::streams::{self, label};

/// Per-round channel realization.
#[derive(Debug, Clone)]
pub struct ChannelState {
    /// Physical channel H, U x K, entries IID N(0, 1).
    pub h: DMatrix<f64>,
    /// Effective channel H P^{1/2}: column k scaled by sqrt(P_k).
    pub h_eff: DMatrix<f64>,
    /// Receiver noise variance.
    pub sigma2: f64,
}

impl ChannelState {
    pub fn sample(seed: u64, round: u64, u: usize, k: usize, powers: &[f64], sigma2: f64) -> Self {
        let h = sample_channel(seed, round, u, k);
        let h_eff = effective_channel(&h, powers);
        Self { h, h_eff, sigma2 }
    }
}

/// Draws the round-t channel from the stream (seed, "H", t), column-major.
pub fn sample_channel(seed: u64, round: u64, u: usize, k: usize) -> DMatrix<f64> {
    let mut rng = streams::substream(seed, label::CHANNEL, &[round]);
    let mut data = vec![0.0; u * k];
    streams::fill_standard_normal(&mut rng, &mut data);
    DMatrix::from_vec(u, k, data)
}

/// Absorbs per-device power factors into the channel columns.
pub fn effective_channel(h: &DMatrix<f64>, powers: &[f64]) -> DMatrix<f64> {
    assert_eq!(h.ncols(), powers.len());
    let mut out = h.clone();
    for (k, &p) in powers.iter().enumerate() {
        let s = p.sqrt();
        for v in out.column_mut(k).iter_mut() {
            *v *= s;
        }
    }
    out
}

/// Simulates the uplink: column m of the result is mat * s[m] + z[m], where
/// s[m] stacks the m-th entry of every device signal and the noise stream is
/// keyed by (seed, "z", round, m). With sigma2 = 0 the output is noiseless.
pub fn transmit(
    mat: &DMatrix<f64>,
    signals: &[Vec<f64>],
    sigma2: f64,
    seed: u64,
    round: u64,
) -> Result<DMatrix<f64>> {
    let k = mat.ncols();
    if signals.len() != k {
        return Err(Error::Dimension {
            what: "transmit signals",
            expected: k,
            got: signals.len(),
        });
    }
    let m_bar = signals.first().map_or(0, |s| s.len());
    for s in signals {
        if s.len() != m_bar {
            return Err(Error::Dimension {
                what: "transmit signal length",
                expected: m_bar,
                got: s.len(),
            });
        }
    }
    let u = mat.nrows();
    let mut y = DMatrix::zeros(u, m_bar);
    let noise_scale = sigma2.sqrt();
    let mut z = vec![0.0; u];
    for m in 0..m_bar {
        let mut col = DVector::zeros(u);
        for (kk, s) in signals.iter().enumerate() {
            let x = s[m];
            if x != 0.0 {
                col.axpy(x, &mat.column(kk).into_owned(), 1.0);
            }
        }
        if sigma2 > 0.0 {
            let mut rng = streams::substream(seed, label::NOISE, &[round, m as u64]);
            streams::fill_standard_normal(&mut rng, &mut z);
            for (c, &zi) in col.iter_mut().zip(z.iter()) {
                *c += noise_scale * zi;
            }
        }
        y.set_column(m, &col);
    }
    Ok(y)
}

/// One block of received resources.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedBlock {
    /// U x M observation matrix, column j holding resource b*M + j.
    pub y: DMatrix<f64>,
    /// Block index b.
    pub block: usize,
}

impl ReceivedBlock {
    /// Global resource indices covered by this block.
    pub fn resources(&self) -> std::ops::Range<usize> {
        let m = self.y.ncols();
        self.block * m..(self.block + 1) * m
    }
}

/// Groups received columns into B blocks of M resources each.
pub fn assemble_blocks(
    y: &DMatrix<f64>,
    num_blocks: usize,
    measure_dim: usize,
) -> Result<Vec<ReceivedBlock>> {
    if y.ncols() != num_blocks * measure_dim {
        return Err(Error::Framing(format!(
            "{} received resources cannot form {} blocks of {}",
            y.ncols(),
            num_blocks,
            measure_dim
        )));
    }
    Ok((0..num_blocks)
        .map(|b| ReceivedBlock {
            y: y.columns(b * measure_dim, measure_dim).into_owned(),
            block: b,
        })
        .collect())
}

const TRACE_MAGIC: &[u8; 4] = b"FCSB";

/// Appends one block to a binary trace: 16-byte header (magic "FCSB",
/// little-endian u32 U, M, b) followed by the U x M samples as row-major f64.
pub fn write_trace(w: &mut impl Write, block: &ReceivedBlock) -> Result<()> {
    let (u, m) = (block.y.nrows() as u32, block.y.ncols() as u32);
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&u.to_le_bytes())?;
    w.write_all(&m.to_le_bytes())?;
    w.write_all(&(block.block as u32).to_le_bytes())?;
    for i in 0..block.y.nrows() {
        for j in 0..block.y.ncols() {
            w.write_all(&block.y[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads every block record from a trace stream.
pub fn read_trace(r: &mut impl Read) -> Result<Vec<ReceivedBlock>> {
    let mut blocks = Vec::new();
    loop {
        let mut header = [0u8; 16];
        match r.read_exact(&mut header[..1]) {
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            other => other?,
        }
        r.read_exact(&mut header[1..])?;
        if &header[..4] != TRACE_MAGIC {
            return Err(Error::Framing("bad trace magic".into()));
        }
        let u = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let b = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; 8];
        let mut y = DMatrix::zeros(u, m);
        for i in 0..u {
            for j in 0..m {
                r.read_exact(&mut buf)?;
                y[(i, j)] = f64::from_le_bytes(buf.as_slice().try_into().unwrap());
            }
        }
        blocks.push(ReceivedBlock { y, block: b });
    }
    Ok(blocks)
}

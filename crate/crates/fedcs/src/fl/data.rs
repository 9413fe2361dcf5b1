//! Image datasets and the single-digit device partition.
//!
//! Images are kept as raw bytes and scaled to [0,1] on access. Data can come
//! from IDX files (the classic big-endian digit-image format) or from a
//! seeded synthetic generator with one random prototype per class, for
//! environments without the real files.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::streams::{self, label};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled image collection, pixels stored as bytes row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    dim: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, dim: usize) -> Result<Self> {
        if dim == 0 || pixels.len() != labels.len() * dim {
            return Err(Error::Idx(format!(
                "{} pixels cannot hold {} samples of dimension {dim}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self {
            pixels,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Pixels of sample `i` scaled into [0,1].
    pub fn image_into(&self, i: usize, out: &mut [f64]) {
        let row = &self.pixels[i * self.dim..(i + 1) * self.dim];
        for (o, &p) in out.iter_mut().zip(row) {
            *o = f64::from(p) / 255.0;
        }
    }

    pub fn image(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.image_into(i, &mut out);
        out
    }
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Idx(format!("truncated {what}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Parses an IDX image/label file pair.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut imf = File::open(images)?;
    let magic = read_u32_be(&mut imf, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Idx(format!(
            "image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut imf, "image count")? as usize;
    let rows = read_u32_be(&mut imf, "image rows")? as usize;
    let cols = read_u32_be(&mut imf, "image cols")? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::Idx("zero-sized images".into()));
    }
    let mut pixels = vec![0u8; count * dim];
    imf.read_exact(&mut pixels)
        .map_err(|_| Error::Idx("truncated image payload".into()))?;

    let mut lbf = File::open(labels)?;
    let magic = read_u32_be(&mut lbf, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Idx(format!(
            "label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32_be(&mut lbf, "label count")? as usize;
    if lcount != count {
        return Err(Error::Idx(format!(
            "{count} images but {lcount} labels"
        )));
    }
    let mut lab = vec![0u8; lcount];
    lbf.read_exact(&mut lab)
        .map_err(|_| Error::Idx("truncated label payload".into()))?;
    Dataset::new(pixels, lab, dim)
}

/// Loads the standard train/test IDX file pairs from one directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Seeded stand-in for the digit data, shaped to learn like the real thing.
/// Images are sparse: a few strokes from a shared dictionary light up and
/// the rest of the canvas stays exactly zero, like mostly-blank digit
/// scans. The sparsity carries into the input-layer gradients, so the
/// per-round top-S budget can drain most of each update instead of piling
/// an ever-growing error-feedback backlog onto the uplink. Classes own a
/// few strokes and borrow from a common pool (shared structure between
/// digits), samples drop and rescale strokes at random, and a slice of the
/// training labels is flipped (ambiguous handwriting) so gradients keep a
/// noise floor after the clean mass is fit. Test labels stay clean.
/// Returns (train, test) with 1200/1000 samples per class.
pub fn synthetic_dataset(seed: u64) -> (Dataset, Dataset) {
    const DIM: usize = 784;
    const TRAIN_PER_CLASS: usize = 1200;
    const TEST_PER_CLASS: usize = 1000;
    const OWN_STROKES: usize = 5;
    const SHARED_POOL: usize = 14;
    const SHARED_PER_CLASS: usize = 3;
    const STROKE_LEN: usize = 16;
    const KEEP_PROB: f64 = 0.7;
    const JITTER: f64 = 0.3;
    const FLIP_FRAC: f64 = 0.05;
    let mut rng = streams::substream(seed, label::DATASET, &[]);
    let stroke = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<usize> {
        let mut px: Vec<usize> = (0..DIM).collect();
        for i in 0..STROKE_LEN {
            let j = rng.gen_range(i..DIM);
            px.swap(i, j);
        }
        px.truncate(STROKE_LEN);
        px
    };
    let own: Vec<Vec<Vec<usize>>> = (0..10)
        .map(|_| (0..OWN_STROKES).map(|_| stroke(&mut rng)).collect())
        .collect();
    let pool: Vec<Vec<usize>> = (0..SHARED_POOL).map(|_| stroke(&mut rng)).collect();
    let borrowed: Vec<Vec<usize>> = (0..10)
        .map(|_| {
            let mut ids: Vec<usize> = (0..SHARED_POOL).collect();
            for i in 0..SHARED_PER_CLASS {
                let j = rng.gen_range(i..SHARED_POOL);
                ids.swap(i, j);
            }
            ids.truncate(SHARED_PER_CLASS);
            ids
        })
        .collect();
    let build = |per_class: usize, flips: bool, rng: &mut rand_chacha::ChaCha12Rng| {
        let total = per_class * 10;
        let mut pixels = Vec::with_capacity(total * DIM);
        let mut labels = Vec::with_capacity(total);
        let mut canvas = vec![0.0f64; DIM];
        for digit in 0..10u8 {
            let d = usize::from(digit);
            for _ in 0..per_class {
                canvas.fill(0.0);
                let strokes = own[d].iter().chain(borrowed[d].iter().map(|&i| &pool[i]));
                for s in strokes {
                    if rng.gen::<f64>() < KEEP_PROB {
                        let amp = rng.gen_range(0.5..1.0);
                        for &p in s {
                            canvas[p] += amp * rng.gen_range(1.0 - JITTER..1.0 + JITTER);
                        }
                    }
                }
                for &v in canvas.iter() {
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
                let label = if flips && rng.gen::<f64>() < FLIP_FRAC {
                    rng.gen_range(0..10u8)
                } else {
                    digit
                };
                labels.push(label);
            }
        }
        Dataset::new(pixels, labels, DIM).expect("consistent synthetic sizes")
    };
    let train = build(TRAIN_PER_CLASS, true, &mut rng);
    let test = build(TEST_PER_CLASS, false, &mut rng);
    (train, test)
}

/// Class assigned to device `k` (zero-based) out of `total`: devices are
/// split into ten contiguous groups.
pub fn device_digit(k: usize, total: usize) -> u8 {
    ((k * 10) / total) as u8
}

/// Samples held by one device, all sharing a single class.
#[derive(Debug, Clone)]
pub struct DeviceDataset {
    pub digit: u8,
    /// Indices into the training dataset.
    pub indices: Vec<usize>,
}

/// Gives every device `samples_per_device` seeded draws (without
/// replacement) from its assigned class.
pub fn partition_non_iid(
    train: &Dataset,
    num_devices: usize,
    samples_per_device: usize,
    seed: u64,
) -> Result<Vec<DeviceDataset>> {
    if num_devices == 0 || samples_per_device == 0 {
        return Err(Error::Partition("need devices and samples".into()));
    }
    let mut by_digit: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for i in 0..train.len() {
        let l = usize::from(train.label(i));
        if l >= 10 {
            return Err(Error::Partition(format!("label {l} outside 0..10")));
        }
        by_digit[l].push(i);
    }
    (0..num_devices)
        .map(|k| {
            let digit = device_digit(k, num_devices);
            let pool = &by_digit[usize::from(digit)];
            if pool.len() < samples_per_device {
                return Err(Error::Partition(format!(
                    "class {digit} has {} samples, device needs {samples_per_device}",
                    pool.len()
                )));
            }
            let mut rng = streams::substream(seed, label::DEVICE_SAMPLES, &[k as u64]);
            let picks = index_sample(&mut rng, pool.len(), samples_per_device);
            Ok(DeviceDataset {
                digit,
                indices: picks.iter().map(|i| pool[i]).collect(),
            })
        })
        .collect()
}

/// Seeded mini-batch positions within a device's sample list.
pub fn draw_batch(
    device_len: usize,
    batch_size: usize,
    seed: u64,
    round: u64,
    device: u64,
) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > device_len {
        return Err(Error::Config(format!(
            "batch size {batch_size} incompatible with {device_len} samples"
        )));
    }
    let mut rng = streams::substream(seed, label::BATCH, &[round, device]);
    Ok(index_sample(&mut rng, device_len, batch_size).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(
        dir: &Path,
        magic_im: u32,
        count: usize,
        rows: usize,
        cols: usize,
        payload: &[u8],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let imp = dir.join("im");
        let lbp = dir.join("lb");
        let mut f = File::create(&imp).unwrap();
        f.write_all(&magic_im.to_be_bytes()).unwrap();
        f.write_all(&(count as u32).to_be_bytes()).unwrap();
        f.write_all(&(rows as u32).to_be_bytes()).unwrap();
        f.write_all(&(cols as u32).to_be_bytes()).unwrap();
        f.write_all(payload).unwrap();
        let mut f = File::create(&lbp).unwrap();
        f.write_all(&LABEL_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
        (imp, lbp)
    }

    #[test]
    fn idx_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..2 * 4).map(|i| (i * 30) as u8).collect();
        let (imp, lbp) = write_idx_pair(dir.path(), IMAGE_MAGIC, 2, 2, 2, &payload, &[3, 7]);
        let ds = load_mnist_idx(&imp, &lbp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.label(1), 7);
        let img = ds.image(0);
        assert!((img[1] - 30.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (imp, lbp) = write_idx_pair(dir.path(), 0x0000_0802, 1, 2, 2, &[0; 4], &[1]);
        let err = load_mnist_idx(&imp, &lbp).unwrap_err().to_string();
        assert!(err.contains("magic"), "error was {err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (imp, lbp) = write_idx_pair(dir.path(), IMAGE_MAGIC, 3, 2, 2, &[0; 5], &[1, 2, 3]);
        let err = load_mnist_idx(&imp, &lbp).unwrap_err().to_string();
        assert!(err.contains("truncated"), "error was {err}");
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (imp, lbp) = write_idx_pair(dir.path(), IMAGE_MAGIC, 2, 2, 2, &[0; 8], &[1]);
        let err = load_mnist_idx(&imp, &lbp).unwrap_err().to_string();
        assert!(err.contains("labels"), "error was {err}");
    }

    #[test]
    fn empty_file_is_a_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        let imp = dir.path().join("empty");
        File::create(&imp).unwrap();
        let err = load_mnist_idx(&imp, &imp).unwrap_err().to_string();
        assert!(err.contains("truncated"), "error was {err}");
    }

    #[test]
    fn digit_map_matches_grouping() {
        // 32 devices: device 5 in one-based counting sits in class 1
        assert_eq!(device_digit(4, 32), 1);
        assert_eq!(device_digit(0, 32), 0);
        assert_eq!(device_digit(31, 32), 9);
        for k in 0..10 {
            assert_eq!(device_digit(k, 10), k as u8);
        }
    }

    #[test]
    fn partition_is_single_class_and_deterministic() {
        let (train, _) = synthetic_dataset(5);
        let parts = partition_non_iid(&train, 32, 100, 9).unwrap();
        assert_eq!(parts.len(), 32);
        for (k, p) in parts.iter().enumerate() {
            assert_eq!(p.digit, device_digit(k, 32));
            assert_eq!(p.indices.len(), 100);
            let mut seen = std::collections::HashSet::new();
            for &i in &p.indices {
                assert_eq!(train.label(i), p.digit);
                assert!(seen.insert(i), "duplicate sample in device {k}");
            }
        }
        let again = partition_non_iid(&train, 32, 100, 9).unwrap();
        for (a, b) in parts.iter().zip(&again) {
            assert_eq!(a.indices, b.indices);
        }
    }

    #[test]
    fn oversubscribed_class_is_an_error() {
        let (train, _) = synthetic_dataset(5);
        assert!(partition_non_iid(&train, 10, 5000, 1).is_err());
    }

    #[test]
    fn synthetic_classes_are_separated() {
        let (train, test) = synthetic_dataset(1);
        assert_eq!(train.len(), 12000);
        assert_eq!(test.len(), 10000);
        // nearest-prototype distances: same-class spread must sit well below
        // the gap between class means
        let mut means = vec![vec![0.0; train.dim()]; 10];
        let mut counts = [0usize; 10];
        let mut buf = vec![0.0; train.dim()];
        for i in 0..train.len() {
            train.image_into(i, &mut buf);
            let d = usize::from(train.label(i));
            counts[d] += 1;
            for (m, v) in means[d].iter_mut().zip(&buf) {
                *m += v;
            }
        }
        for (m, c) in means.iter_mut().zip(counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let mut min_gap = f64::INFINITY;
        for a in 0..10 {
            for b in (a + 1)..10 {
                let gap: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                min_gap = min_gap.min(gap);
            }
        }
        assert!(min_gap > 1.0, "class means too close: {min_gap}");
    }

    #[test]
    fn batches_are_seeded_and_in_range() {
        let b1 = draw_batch(1000, 10, 3, 7, 2).unwrap();
        let b2 = draw_batch(1000, 10, 3, 7, 2).unwrap();
        assert_eq!(b1, b2);
        assert!(b1.iter().all(|&i| i < 1000));
        let other = draw_batch(1000, 10, 3, 8, 2).unwrap();
        assert_ne!(b1, other);
        assert!(draw_batch(5, 10, 1, 1, 1).is_err());
    }
}

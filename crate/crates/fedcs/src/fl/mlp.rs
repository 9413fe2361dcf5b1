//! Single-hidden-layer classifier trained with softmax cross entropy.
//!
//! Parameters live in one flat vector so the whole model can be treated as
//! the gradient signal: hidden weights row by row, hidden biases, output
//! weights row by row, output biases.

use crate::error::{Error, Result};
use crate::streams::{self, label};
use rand::Rng;

/// Layer sizes of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl MlpShape {
    pub fn new(input: usize, hidden: usize, output: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(Self {
            input,
            hidden,
            output,
        })
    }

    /// Total parameter count.
    pub fn dim(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.input
    }

    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input;
        s..s + self.hidden
    }

    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input + self.hidden;
        s..s + self.output * self.hidden
    }

    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.input + self.hidden + self.output * self.hidden;
        s..s + self.output
    }
}

/// Flat-parameter multilayer perceptron.
#[derive(Debug, Clone)]
pub struct MlpModel {
    pub shape: MlpShape,
    pub w: Vec<f64>,
}

impl MlpModel {
    /// Seeded uniform init with per-layer ranges sqrt(6/(fan_in+fan_out)).
    pub fn init(shape: MlpShape, seed: u64) -> Self {
        let mut rng = streams::substream(seed, label::WEIGHT_INIT, &[]);
        let mut w = vec![0.0; shape.dim()];
        let a1 = (6.0 / (shape.input + shape.hidden) as f64).sqrt();
        for i in shape.w1() {
            w[i] = rng.gen_range(-a1..a1);
        }
        let a2 = (6.0 / (shape.hidden + shape.output) as f64).sqrt();
        for i in shape.w2() {
            w[i] = rng.gen_range(-a2..a2);
        }
        Self { shape, w }
    }

    pub fn from_params(shape: MlpShape, w: Vec<f64>) -> Result<Self> {
        if w.len() != shape.dim() {
            return Err(Error::Dimension {
                what: "model parameters",
                expected: shape.dim(),
                got: w.len(),
            });
        }
        Ok(Self { shape, w })
    }

    /// Hidden activations and class probabilities for one input.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = &self.shape;
        debug_assert_eq!(x.len(), s.input);
        let w1 = &self.w[s.w1()];
        let b1 = &self.w[s.b1()];
        let mut hidden = vec![0.0; s.hidden];
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &w1[j * s.input..(j + 1) * s.input];
            let mut z = b1[j];
            for (wv, xv) in row.iter().zip(x) {
                z += wv * xv;
            }
            *h = z.max(0.0);
        }
        let w2 = &self.w[s.w2()];
        let b2 = &self.w[s.b2()];
        let mut logits = vec![0.0; s.output];
        for (o, l) in logits.iter_mut().enumerate() {
            let row = &w2[o * s.hidden..(o + 1) * s.hidden];
            let mut z = b2[o];
            for (wv, hv) in row.iter().zip(&hidden) {
                z += wv * hv;
            }
            *l = z;
        }
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        (hidden, probs)
    }

    /// Mean cross-entropy loss and its gradient over a batch of
    /// (pixels, class) pairs.
    pub fn loss_and_gradient(&self, batch: &[(&[f64], u8)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Config("gradient needs a nonempty batch".into()));
        }
        let s = &self.shape;
        let mut grad = vec![0.0; s.dim()];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let w2 = self.w[s.w2()].to_vec();
        let (w1r, b1r, w2r, b2r) = (s.w1(), s.b1(), s.w2(), s.b2());
        for &(x, label) in batch {
            if x.len() != s.input || usize::from(label) >= s.output {
                return Err(Error::Dimension {
                    what: "training sample",
                    expected: s.input,
                    got: x.len(),
                });
            }
            let (hidden, probs) = self.forward(x);
            loss -= scale * probs[usize::from(label)].max(1e-300).ln();
            // output-layer error, then push through the linear maps
            let mut d2 = probs;
            d2[usize::from(label)] -= 1.0;
            for (o, &d) in d2.iter().enumerate() {
                let g2 = &mut grad[w2r.start + o * s.hidden..w2r.start + (o + 1) * s.hidden];
                for (gv, hv) in g2.iter_mut().zip(&hidden) {
                    *gv += scale * d * hv;
                }
                grad[b2r.start + o] += scale * d;
            }
            for (j, &hv) in hidden.iter().enumerate() {
                if hv <= 0.0 {
                    continue;
                }
                let mut back = 0.0;
                for (o, &d) in d2.iter().enumerate() {
                    back += d * w2[o * s.hidden + j];
                }
                let g1 = &mut grad[w1r.start + j * s.input..w1r.start + (j + 1) * s.input];
                for (gv, xv) in g1.iter_mut().zip(x) {
                    *gv += scale * back * xv;
                }
                grad[b1r.start + j] += scale * back;
            }
        }
        Ok((loss, grad))
    }

    /// Predicted class, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> u8 {
        let (_, probs) = self.forward(x);
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        best as u8
    }
}

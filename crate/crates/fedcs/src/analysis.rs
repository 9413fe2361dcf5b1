//! Closed-form predictions used as oracles next to the simulator.
//!
//! The detector-stage extrinsic variance has two equivalent forms: an
//! eigendecomposition of the interference covariance and a direct quadratic
//! form through the full covariance inverse. Both are kept so each can check
//! the other. On top of them sit the one-shot aggregate MSE bound and the
//! SGD convergence bound.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numeric::norm_sq;

/// Everything the closed forms need about one round.
#[derive(Debug, Clone)]
pub struct AnalysisInputs {
    /// Raw channel, one column per device.
    pub h: DMatrix<f64>,
    /// Per-device power scaling factors.
    pub powers: Vec<f64>,
    pub sigma2: f64,
    /// Compression ratio N/M.
    pub ratio: f64,
    /// Per-block dimension N.
    pub block_dim: usize,
    /// Per-device per-block gradient variances, `zeta[k][b]`.
    pub zeta: Vec<Vec<f64>>,
    /// Per-device per-block gradient means, same shape as `zeta`.
    pub mu: Vec<Vec<f64>>,
    /// Aggregation weights, one per device, summing to one.
    pub weights: Vec<f64>,
}

impl AnalysisInputs {
    pub fn validate(&self) -> Result<()> {
        let k = self.h.ncols();
        if k == 0 || self.h.nrows() == 0 {
            return Err(Error::Config("analysis needs a nonempty channel".into()));
        }
        if self.powers.len() != k || self.zeta.len() != k || self.mu.len() != k
            || self.weights.len() != k
        {
            return Err(Error::Dimension {
                what: "analysis per-device arrays",
                expected: k,
                got: self.powers.len().min(self.zeta.len()).min(self.weights.len()),
            });
        }
        let b = self.zeta[0].len();
        if b == 0 || self.zeta.iter().any(|z| z.len() != b) || self.mu.iter().any(|m| m.len() != b)
        {
            return Err(Error::Dimension {
                what: "analysis per-block arrays",
                expected: b,
                got: 0,
            });
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config("analysis needs sigma2 > 0".into()));
        }
        if !(self.ratio > 0.0) {
            return Err(Error::Config("analysis needs ratio > 0".into()));
        }
        if self.block_dim == 0 {
            return Err(Error::Config("analysis needs block_dim > 0".into()));
        }
        if self.powers.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("analysis needs positive powers".into()));
        }
        if self.zeta.iter().flatten().any(|&z| !(z >= 0.0)) {
            return Err(Error::Config("analysis needs nonnegative variances".into()));
        }
        let wsum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "aggregation weights must be a simplex, sum is {wsum}"
            )));
        }
        Ok(())
    }

    // R sum_{j != k} zeta_j P_j h_j h_j', the interference seen by device k.
    fn interference(&self, k: usize, b: usize) -> DMatrix<f64> {
        let u = self.h.nrows();
        let mut phi = DMatrix::zeros(u, u);
        for j in 0..self.h.ncols() {
            if j == k {
                continue;
            }
            let scale = self.ratio * self.zeta[j][b] * self.powers[j];
            let hj = self.h.column(j);
            for r in 0..u {
                for c in 0..u {
                    phi[(r, c)] += scale * hj[r] * hj[c];
                }
            }
        }
        phi
    }

    fn check_kb(&self, k: usize, b: usize) -> Result<()> {
        self.validate()?;
        if k >= self.h.ncols() || b >= self.zeta[0].len() {
            return Err(Error::Config(format!("device {k} block {b} out of range")));
        }
        Ok(())
    }
}

/// Detector-stage extrinsic noise variance for device `k` on block `b`,
/// eigendecomposition form. A zero channel column yields infinity.
pub fn extrinsic_variance_lemma1(inputs: &AnalysisInputs, k: usize, b: usize) -> Result<f64> {
    inputs.check_kb(k, b)?;
    let hk = inputs.h.column(k).clone_owned();
    let hk_sq = norm_sq(hk.as_slice());
    if hk_sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    let phi = inputs.interference(k, b);
    let eig = SymmetricEigen::new(phi);
    let lambda_max = eig.eigenvalues.iter().fold(0.0_f64, |a, &l| a.max(l));
    let cutoff = lambda_max * 1e-14;
    let mut cross = 0.0;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= cutoff {
            continue;
        }
        let proj = eig.eigenvectors.column(i).dot(&hk);
        cross += proj * proj * l / (l + inputs.sigma2);
    }
    let denom = hk_sq - cross;
    if denom <= 0.0 {
        return Err(Error::Numeric(format!(
            "nonpositive effective channel gain {denom}"
        )));
    }
    Ok(inputs.sigma2 / inputs.powers[k] / denom)
}

/// Same quantity through the covariance inverse: nu = 1 / (P_k h_k'
/// (Phi + sigma2 I)^{-1} h_k). Used to cross-check the eigenform.
pub fn extrinsic_variance_direct(inputs: &AnalysisInputs, k: usize, b: usize) -> Result<f64> {
    inputs.check_kb(k, b)?;
    let hk = inputs.h.column(k).clone_owned();
    if norm_sq(hk.as_slice()) == 0.0 {
        return Ok(f64::INFINITY);
    }
    let u = inputs.h.nrows();
    let mut cov = inputs.interference(k, b);
    for i in 0..u {
        cov[(i, i)] += inputs.sigma2;
    }
    let chol = Cholesky::new(cov)
        .ok_or_else(|| Error::Numeric("interference covariance not positive definite".into()))?;
    let solved: DVector<f64> = chol.solve(&hk);
    let chi = inputs.powers[k] * hk.dot(&solved);
    if chi <= 0.0 {
        return Err(Error::Numeric(format!("nonpositive channel statistic {chi}")));
    }
    Ok(1.0 / chi)
}

/// One-shot aggregate MSE bound:
/// sum_{k,b} rho_k^2 N zeta_{k,b} (1 - zeta_{k,b} / (R zeta_{k,b} + nu_{k,b})).
pub fn mse_bound_thm1(inputs: &AnalysisInputs, nu: &[Vec<f64>]) -> Result<f64> {
    inputs.validate()?;
    let (k, b) = (inputs.zeta.len(), inputs.zeta[0].len());
    if nu.len() != k || nu.iter().any(|n| n.len() != b) {
        return Err(Error::Dimension {
            what: "mse_bound_thm1 variances",
            expected: k * b,
            got: nu.iter().map(Vec::len).sum(),
        });
    }
    let mut bound = 0.0;
    for kk in 0..k {
        let rho2 = inputs.weights[kk] * inputs.weights[kk];
        for bb in 0..b {
            let z = inputs.zeta[kk][bb];
            if z == 0.0 {
                continue;
            }
            let v = nu[kk][bb];
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "negative noise variance for device {kk} block {bb}"
                )));
            }
            let term = if v.is_infinite() {
                z
            } else {
                z * (1.0 - z / (inputs.ratio * z + v))
            };
            bound += rho2 * inputs.block_dim as f64 * term;
        }
    }
    Ok(bound)
}

/// Inputs of the convergence bound.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceParams {
    /// Gradient smoothness constant.
    pub beta: f64,
    /// Inter-device gradient dispersion scale.
    pub psi: f64,
    /// Maximum normalized reconstruction error across rounds.
    pub eps_max: f64,
    /// Base learning rate; round t uses eta / sqrt(t).
    pub eta: f64,
    pub rounds: u64,
    pub loss_initial: f64,
    pub loss_optimal: f64,
}

/// Bound on the average squared gradient norm after `rounds` rounds:
/// (F(w_1) - F*) / ((c1 eta - c2 eta^2) sqrt(T)).
pub fn convergence_bound_thm2(p: &ConvergenceParams) -> Result<f64> {
    if !(p.beta > 0.0) {
        return Err(Error::Domain("smoothness beta must be positive".into()));
    }
    if !(p.psi >= 0.0) {
        return Err(Error::Domain("dispersion psi must be nonnegative".into()));
    }
    if !(p.eps_max >= 0.0) || p.eps_max >= 1.0 / (1.0 + p.psi) {
        return Err(Error::Domain(format!(
            "eps_max {} must lie in [0, 1/(1+psi)) = [0, {})",
            p.eps_max,
            1.0 / (1.0 + p.psi)
        )));
    }
    let c1 = (1.0 - p.eps_max * (1.0 + p.psi)) / 2.0;
    let c2 = p.beta * (1.0 + p.eps_max) * (1.0 + p.psi);
    if !(p.eta > 0.0) || p.eta >= c1 / c2 {
        return Err(Error::Domain(format!(
            "learning rate {} must lie in (0, c1/c2 = {})",
            p.eta,
            c1 / c2
        )));
    }
    if p.rounds == 0 {
        return Err(Error::Domain("round count must be positive".into()));
    }
    if p.loss_initial < p.loss_optimal {
        return Err(Error::Domain(
            "initial loss must not be below the optimum".into(),
        ));
    }
    let denom = (c1 * p.eta - c2 * p.eta * p.eta) * (p.rounds as f64).sqrt();
    Ok((p.loss_initial - p.loss_optimal) / denom)
}

/// Largest gradient-difference to parameter-difference ratio over trace
/// pairs, a probe of the smoothness constant.
pub fn estimate_beta(trace: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if trace.len() < 2 {
        return Err(Error::Config("smoothness probe needs at least two points".into()));
    }
    let mut beta = 0.0_f64;
    for i in 0..trace.len() {
        for j in (i + 1)..trace.len() {
            let (wi, gi) = &trace[i];
            let (wj, gj) = &trace[j];
            let dw: f64 = wi.iter().zip(wj).map(|(a, b)| (a - b) * (a - b)).sum();
            let dg: f64 = gi.iter().zip(gj).map(|(a, b)| (a - b) * (a - b)).sum();
            if dw > 0.0 {
                beta = beta.max((dg / dw).sqrt());
            }
        }
    }
    Ok(beta)
}

/// Mean squared deviation of device gradients around their average,
/// normalized by the averaged gradient power.
pub fn estimate_psi(device_grads: &[Vec<f64>]) -> Result<f64> {
    let k = device_grads.len();
    if k == 0 {
        return Err(Error::Config("dispersion probe needs gradients".into()));
    }
    let n = device_grads[0].len();
    if device_grads.iter().any(|g| g.len() != n) || n == 0 {
        return Err(Error::Dimension {
            what: "dispersion probe gradient length",
            expected: n,
            got: 0,
        });
    }
    let mut avg = vec![0.0; n];
    for g in device_grads {
        for (a, v) in avg.iter_mut().zip(g) {
            *a += v / k as f64;
        }
    }
    let denom = norm_sq(&avg);
    if denom == 0.0 {
        return Err(Error::Config("dispersion probe needs a nonzero average".into()));
    }
    let mut dev = 0.0;
    for g in device_grads {
        dev += g
            .iter()
            .zip(&avg)
            .map(|(v, a)| (v - a) * (v - a))
            .sum::<f64>();
    }
    Ok(dev / k as f64 / denom)
}

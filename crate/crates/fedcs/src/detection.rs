//! Linear MMSE multiuser detection and extrinsic belief conversion.
//!
//! For one shared resource the receiver sees y = H_eff x + z where x stacks
//! one unscaled compressed-gradient entry per device. Given independent
//! Gaussian priors per device, the posterior is the standard linear MMSE
//! update; the innovation covariance is applied through a Cholesky solve,
//! never an explicit inverse. Posteriors are converted to extrinsic beliefs
//! before being handed to the other reconstruction module.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::count::OpCounter;
use crate::error::{Error, Result};
use crate::numeric::VarClamp;

/// Where a belief sits in the turbo exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeliefRole {
    Prior,
    Posterior,
    Extrinsic,
}

/// Scalar Gaussian belief.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefPair {
    pub mean: f64,
    pub var: f64,
}

/// Beliefs of the K per-device entries sharing one resource.
#[derive(Debug, Clone)]
pub struct ResourceBeliefs {
    pub pairs: Vec<BeliefPair>,
    pub role: BeliefRole,
    /// Full posterior covariance; present on detector output only.
    pub post_cov: Option<DMatrix<f64>>,
}

impl ResourceBeliefs {
    pub fn prior(pairs: Vec<BeliefPair>) -> Self {
        Self {
            pairs,
            role: BeliefRole::Prior,
            post_cov: None,
        }
    }

    pub fn extrinsic(pairs: Vec<BeliefPair>) -> Self {
        Self {
            pairs,
            role: BeliefRole::Extrinsic,
            post_cov: None,
        }
    }
}

/// Exact multiply count of one `mmse_detect` call, used for accounting.
pub fn mmse_detect_mult_count(u: u64, k: u64) -> u64 {
    // scaled columns + covariance build + Cholesky + innovation solve +
    // posterior means + K solves + K x K posterior + diagonal scaling
    u * k + k * u * (u + 1) / 2 + u * u * u / 6 + u * k + u * u + k * (u + 1)
        + k * u * u + k * k * u + 2 * k * k
}

/// One-resource MMSE detection. Returns per-device posterior means and
/// variances plus the full K x K posterior covariance.
pub fn mmse_detect(
    y: &DVector<f64>,
    h_eff: &DMatrix<f64>,
    priors: &ResourceBeliefs,
    sigma2: f64,
    counter: &OpCounter,
) -> Result<ResourceBeliefs> {
    let (u, k) = (h_eff.nrows(), h_eff.ncols());
    if y.len() != u {
        return Err(Error::Dimension {
            what: "mmse_detect observation",
            expected: u,
            got: y.len(),
        });
    }
    if priors.pairs.len() != k {
        return Err(Error::Dimension {
            what: "mmse_detect priors",
            expected: k,
            got: priors.pairs.len(),
        });
    }
    if sigma2 <= 0.0 {
        return Err(Error::Config("mmse_detect needs sigma2 > 0".into()));
    }
    if priors.role == BeliefRole::Posterior {
        return Err(Error::Config(
            "posterior beliefs must be converted to extrinsic before reuse".into(),
        ));
    }

    // innovation covariance S = H D H^T + sigma2 I with D = diag(prior vars)
    let mut scaled = h_eff.clone();
    for (kk, p) in priors.pairs.iter().enumerate() {
        for v in scaled.column_mut(kk).iter_mut() {
            *v *= p.var;
        }
    }
    let mut s = &scaled * h_eff.transpose();
    for i in 0..u {
        s[(i, i)] += sigma2;
    }
    let chol = Cholesky::new(s).ok_or_else(|| {
        Error::Numeric("innovation covariance is not positive definite".into())
    })?;

    // innovation and posterior means
    let mut resid = y.clone();
    for (kk, p) in priors.pairs.iter().enumerate() {
        if p.mean != 0.0 {
            resid.axpy(-p.mean, &h_eff.column(kk).into_owned(), 1.0);
        }
    }
    let w = chol.solve(&resid);
    // posterior covariance D - D H^T S^{-1} H D
    let sol = chol.solve(h_eff);
    let mut t = h_eff.transpose() * &sol;
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = 0.5 * (t[(i, j)] + t[(j, i)]);
            t[(i, j)] = avg;
            t[(j, i)] = avg;
        }
    }
    let mut cov = DMatrix::zeros(k, k);
    let mut pairs = Vec::with_capacity(k);
    for i in 0..k {
        let vi = priors.pairs[i].var;
        for j in 0..k {
            let vj = priors.pairs[j].var;
            cov[(i, j)] = if i == j {
                vi - vi * t[(i, i)] * vi
            } else {
                -vi * t[(i, j)] * vj
            };
        }
        let mean = priors.pairs[i].mean + vi * h_eff.column(i).dot(&w);
        let var = cov[(i, i)].max(0.0);
        cov[(i, i)] = var;
        pairs.push(BeliefPair { mean, var });
    }
    counter.add(mmse_detect_mult_count(u as u64, k as u64));
    Ok(ResourceBeliefs {
        pairs,
        role: BeliefRole::Posterior,
        post_cov: Some(cov),
    })
}

/// Converts a (posterior, prior) pair into the extrinsic belief:
/// 1/nu_ext = 1/nu_post - 1/nu_pri, mean weighted accordingly. A
/// non-informative update (nu_post >= nu_pri) yields the clamp ceiling with
/// the posterior mean; the bool reports whether any clamp engaged.
pub fn extrinsic(post: BeliefPair, pri: BeliefPair, clamp: VarClamp) -> (BeliefPair, bool) {
    let denom = pri.var - post.var;
    if denom <= 0.0 || !denom.is_finite() {
        return (
            BeliefPair {
                mean: post.mean,
                var: clamp.max,
            },
            true,
        );
    }
    let var_raw = post.var * pri.var / denom;
    let var = clamp.apply(var_raw);
    let mean = (post.mean * pri.var - pri.mean * post.var) / denom;
    (BeliefPair { mean, var }, var != var_raw)
}

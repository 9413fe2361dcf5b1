//! EM-GAMP estimation of one sparse gradient block.
//!
//! Given pseudo-observations of the compressed block (mean vector plus a
//! scalar variance from the detector) and the shared projection A, generalized
//! approximate message passing alternates between the measurement side
//! (Onsager-corrected linear step) and a Bernoulli-Gaussian-mixture denoiser
//! whose spike weight, component weights, means, and spreads are re-fit by EM
//! every iteration. All per-coefficient work is in closed form.

use crate::compression::MeasurementMatrix;
use crate::count::OpCounter;
use crate::error::{Error, Result};
use crate::numeric::{norm_sq, VarClamp};

/// Bernoulli-Gaussian-mixture prior: weight `lambda0` on an exact zero and
/// `weights[l]` on N(means[l], vars[l]).
#[derive(Debug, Clone, PartialEq)]
pub struct BgMixtureParams {
    pub lambda0: f64,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    /// Lower bound applied to component spreads during EM re-fits.
    pub var_floor: f64,
}

impl BgMixtureParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.weights.len();
        if l == 0 || self.means.len() != l || self.vars.len() != l {
            return Err(Error::Config("mixture arrays must share a nonzero length".into()));
        }
        let total = self.lambda0 + self.weights.iter().sum::<f64>();
        if !(self.lambda0 >= 0.0) || self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        if self.vars.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("mixture spreads must be positive and finite".into()));
        }
        Ok(())
    }

    /// Spreads the L component means uniformly across the range of the
    /// starting estimate and gives each component the variance of a uniform
    /// bin: means[l] = min + (2l-1)/(2L) (max-min), vars[l] = ((max-min)/L)^2/12.
    pub fn init_from(g_init: &[f64], lambda0: f64, l: usize) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in g_init {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 0.0;
        }
        let span = hi - lo;
        let var_floor = (1e-6 * span * span).max(1e-6 * 1e-6).max(1e-300);
        let spread = ((span / l as f64).powi(2) / 12.0).max(var_floor);
        let means = (1..=l)
            .map(|i| lo + (2 * i - 1) as f64 / (2 * l) as f64 * span)
            .collect();
        Self {
            lambda0,
            weights: vec![(1.0 - lambda0) / l as f64; l],
            means,
            vars: vec![spread; l],
            var_floor,
        }
    }
}

/// EM-GAMP iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct GampConfig {
    pub max_iters: usize,
    /// Stop once sum((g_old - g)^2) < tol * sum(g_old^2).
    pub tol: f64,
    /// 1.0 disables damping; lower values blend in the previous iterate.
    pub damping: f64,
    pub clamp: VarClamp,
}

impl Default for GampConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            tol: 1e-5,
            damping: 1.0,
            clamp: VarClamp::DEFAULT,
        }
    }
}

/// Posterior of one coefficient under the spike-plus-mixture prior and a
/// Gaussian observation r ~ N(g, nu_r).
#[derive(Debug, Clone)]
pub struct BgPosterior {
    pub mean: f64,
    pub var: f64,
    /// Responsibilities: index 0 is the spike, then the L components.
    pub resp: Vec<f64>,
    /// Per-component posterior means.
    pub comp_means: Vec<f64>,
    /// Per-component posterior spreads.
    pub comp_vars: Vec<f64>,
}

/// Scalar denoiser. Log-domain responsibilities with max subtraction; an
/// all-degenerate row falls back to the spike.
pub fn bg_posterior(r: f64, nu_r: f64, theta: &BgMixtureParams) -> BgPosterior {
    let l = theta.components();
    let mut resp = vec![0.0; l + 1];
    let mut comp_means = vec![0.0; l];
    let mut comp_vars = vec![0.0; l];
    let (mean, var) = bg_posterior_into(
        r,
        nu_r,
        theta,
        &mut resp,
        &mut comp_means,
        &mut comp_vars,
    );
    BgPosterior {
        mean,
        var,
        resp,
        comp_means,
        comp_vars,
    }
}

#[inline]
fn bg_posterior_into(
    r: f64,
    nu_r: f64,
    theta: &BgMixtureParams,
    resp: &mut [f64],
    comp_means: &mut [f64],
    comp_vars: &mut [f64],
) -> (f64, f64) {
    let l = theta.components();
    // log responsibilities; spike sees N(r; 0, nu_r), component l sees
    // N(r; mu_l, nu_r + phi_l)
    resp[0] = if theta.lambda0 > 0.0 {
        theta.lambda0.ln() - 0.5 * (nu_r.ln() + r * r / nu_r)
    } else {
        f64::NEG_INFINITY
    };
    for i in 0..l {
        let v = nu_r + theta.vars[i];
        let d = r - theta.means[i];
        resp[i + 1] = if theta.weights[i] > 0.0 {
            theta.weights[i].ln() - 0.5 * (v.ln() + d * d / v)
        } else {
            f64::NEG_INFINITY
        };
        comp_means[i] = (r * theta.vars[i] + theta.means[i] * nu_r) / v;
        comp_vars[i] = nu_r * theta.vars[i] / v;
    }
    let mx = resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        // degenerate row: park everything on the spike
        resp[0] = 1.0;
        resp[1..].fill(0.0);
        return (0.0, 0.0);
    }
    let mut total = 0.0;
    for v in resp.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    let mut mean = 0.0;
    let mut second = 0.0;
    for i in 0..=l {
        resp[i] /= total;
        if i > 0 {
            let (m, p) = (comp_means[i - 1], comp_vars[i - 1]);
            mean += resp[i] * m;
            second += resp[i] * (p + m * m);
        }
    }
    (mean, (second - mean * mean).max(0.0))
}

/// EM re-fit of the mixture from the per-coefficient responsibilities and
/// component posteriors. Components that captured no mass are frozen; the
/// weight vector is renormalized to the simplex and spreads stay above the
/// floor.
pub fn em_update(
    resp: &[f64],
    comp_means: &[f64],
    comp_vars: &[f64],
    n: usize,
    theta: &mut BgMixtureParams,
) {
    let l = theta.components();
    debug_assert_eq!(resp.len(), n * (l + 1));
    debug_assert_eq!(comp_means.len(), n * l);
    let mut lambda0 = 0.0;
    let mut wsum = vec![0.0; l];
    let mut msum = vec![0.0; l];
    let mut vsum = vec![0.0; l];
    for j in 0..n {
        lambda0 += resp[j * (l + 1)];
        for i in 0..l {
            let w = resp[j * (l + 1) + 1 + i];
            let m = comp_means[j * l + i];
            let p = comp_vars[j * l + i];
            wsum[i] += w;
            msum[i] += w * m;
            let d = theta.means[i] - m;
            vsum[i] += w * (d * d + p);
        }
    }
    let nf = n as f64;
    let mut total = lambda0 / nf;
    let mut new_w = vec![0.0; l];
    for i in 0..l {
        new_w[i] = wsum[i] / nf;
        total += new_w[i];
        if wsum[i] > 1e-300 {
            theta.means[i] = msum[i] / wsum[i];
            theta.vars[i] = (vsum[i] / wsum[i]).max(theta.var_floor);
        }
    }
    if total > 0.0 {
        theta.lambda0 = lambda0 / nf / total;
        for i in 0..l {
            theta.weights[i] = new_w[i] / total;
        }
    }
}

/// Outcome of one EM-GAMP run.
#[derive(Debug, Clone)]
pub struct GampResult {
    /// Posterior means of the compressed entries, one per measurement row.
    pub x_post: Vec<f64>,
    /// Posterior variances of the compressed entries.
    pub nu_x_post: Vec<f64>,
    pub iterations: usize,
    /// True when non-finite values forced a fallback to the input estimate.
    pub diverged: bool,
    /// Relative squared change of the block estimate at exit.
    pub relative_change: f64,
}

/// Multiply count of one GAMP iteration, for complexity accounting.
pub fn gamp_iteration_mult_count(m: u64, n: u64, l: u64) -> u64 {
    4 * n * m + 11 * m + n * (15 * l + 12)
}

/// Runs EM-GAMP on one (device, block) instance. `g_hat`, `nu_g`, and `theta`
/// carry the running estimate across turbo iterations and are updated in
/// place; `x_pri`/`nu_pri_bar` are the detector's extrinsic mean vector and
/// block-averaged variance.
#[allow(clippy::too_many_arguments)]
pub fn em_gamp(
    g_hat: &mut [f64],
    nu_g: &mut [f64],
    theta: &mut BgMixtureParams,
    x_pri: &[f64],
    nu_pri_bar: f64,
    a: &MeasurementMatrix,
    cfg: &GampConfig,
    counter: &OpCounter,
) -> Result<GampResult> {
    let (m, n) = (a.rows(), a.cols());
    if g_hat.len() != n || nu_g.len() != n {
        return Err(Error::Dimension {
            what: "em_gamp block estimate",
            expected: n,
            got: g_hat.len(),
        });
    }
    if x_pri.len() != m {
        return Err(Error::Dimension {
            what: "em_gamp pseudo-observation",
            expected: m,
            got: x_pri.len(),
        });
    }
    theta.validate()?;
    if cfg.max_iters == 0 || !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::Config("gamp needs max_iters >= 1 and damping in (0, 1]".into()));
    }
    let clamp = cfg.clamp;
    let nu_pri_bar = clamp.apply(nu_pri_bar);
    let l = theta.components();

    // divergence fallback snapshot
    let g_snap = g_hat.to_vec();
    let nu_snap = nu_g.to_vec();
    let theta_snap = theta.clone();

    let mut s_hat = vec![0.0; m];
    let mut az = vec![0.0; m];
    let mut nu_p = vec![0.0; m];
    let mut p_hat = vec![0.0; m];
    let mut x_post = vec![0.0; m];
    let mut nu_x_post = vec![0.0; m];
    let mut nu_s = vec![0.0; m];
    let mut rsum = vec![0.0; n];
    let mut vsum = vec![0.0; n];
    let mut resp = vec![0.0; n * (l + 1)];
    let mut comp_means = vec![0.0; n * l];
    let mut comp_vars = vec![0.0; n * l];
    let mut g_prev = g_hat.to_vec();

    let mut iterations = 0;
    let mut change = f64::INFINITY;
    for it in 1..=cfg.max_iters {
        iterations = it;
        // linear output step: az = A g, nu_p = A^2 nu_g (fused column pass)
        az.fill(0.0);
        nu_p.fill(0.0);
        for j in 0..n {
            let (gj, vj) = (g_hat[j], nu_g[j]);
            let col = a.col(j);
            let col_sq = a.col_sq(j);
            for ((azm, npm), (&ac, &asq)) in az
                .iter_mut()
                .zip(nu_p.iter_mut())
                .zip(col.iter().zip(col_sq))
            {
                *azm += ac * gj;
                *npm += asq * vj;
            }
        }
        for v in nu_p.iter_mut() {
            *v = clamp.apply(*v);
        }
        // Onsager-corrected pseudo-measurement and posterior on x
        for i in 0..m {
            p_hat[i] = az[i] - nu_p[i] * s_hat[i];
            let denom = nu_p[i] + nu_pri_bar;
            x_post[i] = (p_hat[i] * nu_pri_bar + x_pri[i] * nu_p[i]) / denom;
            nu_x_post[i] = clamp.apply(nu_p[i] * nu_pri_bar / denom);
            let s_new = (x_post[i] - p_hat[i]) / nu_p[i];
            s_hat[i] = cfg.damping * s_new + (1.0 - cfg.damping) * s_hat[i];
            nu_s[i] = ((1.0 - nu_x_post[i] / nu_p[i]) / nu_p[i]).max(0.0);
        }
        // linear input step: rsum = A^T s, vsum = (A^2)^T nu_s (fused)
        for j in 0..n {
            let col = a.col(j);
            let col_sq = a.col_sq(j);
            let mut racc = 0.0;
            let mut vacc = 0.0;
            for ((&ac, &asq), (&sm, &vs)) in
                col.iter().zip(col_sq).zip(s_hat.iter().zip(nu_s.iter()))
            {
                racc += ac * sm;
                vacc += asq * vs;
            }
            rsum[j] = racc;
            vsum[j] = vacc;
        }
        // denoise each coefficient and re-fit the mixture
        for j in 0..n {
            let nu_r = clamp.apply(1.0 / vsum[j]);
            let r = g_hat[j] + nu_r * rsum[j];
            let (gm, gv) = bg_posterior_into(
                r,
                nu_r,
                theta,
                &mut resp[j * (l + 1)..(j + 1) * (l + 1)],
                &mut comp_means[j * l..(j + 1) * l],
                &mut comp_vars[j * l..(j + 1) * l],
            );
            g_hat[j] = cfg.damping * gm + (1.0 - cfg.damping) * g_hat[j];
            nu_g[j] = clamp.apply(gv);
        }
        em_update(&resp, &comp_means, &comp_vars, n, theta);
        counter.add(gamp_iteration_mult_count(m as u64, n as u64, l as u64));

        let num: f64 = g_prev
            .iter()
            .zip(g_hat.iter())
            .map(|(&o, &g)| (o - g) * (o - g))
            .sum();
        let finite = num.is_finite()
            && g_hat.iter().all(|v| v.is_finite())
            && nu_g.iter().all(|v| v.is_finite())
            && x_post.iter().all(|v| v.is_finite())
            && theta.validate().is_ok();
        if !finite {
            g_hat.copy_from_slice(&g_snap);
            nu_g.copy_from_slice(&nu_snap);
            *theta = theta_snap;
            return Ok(GampResult {
                x_post: x_pri.to_vec(),
                nu_x_post: vec![nu_pri_bar; m],
                iterations: it,
                diverged: true,
                relative_change: f64::INFINITY,
            });
        }

        let den = norm_sq(&g_prev);
        change = if den > 0.0 { num / den } else { f64::INFINITY };
        g_prev.copy_from_slice(g_hat);
        if num < cfg.tol * den {
            break;
        }
    }

    Ok(GampResult {
        x_post,
        nu_x_post,
        iterations,
        diverged: false,
        relative_change: change,
    })
}

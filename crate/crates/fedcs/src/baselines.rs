//! Greedy-pursuit reference reconstructors.
//!
//! Three baselines share the received-block model Y = H̃ Gᵀ Aᵀ + Z:
//! `lmmse_omp` detects the compressed signals first and then runs plain
//! per-device OMP, `omp_2d` selects rank-one atoms h̃_k c_nᵀ with batched
//! correlations, and `kron_omp` selects the same atoms but evaluates each
//! correlation independently in operator form, which is what its published
//! cost model assumes. All variants refit by least squares over the active
//! set each iteration and rebuild the residual from scratch.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::compression::MeasurementMatrix;
use crate::count::OpCounter;
use crate::detection::{extrinsic, mmse_detect, BeliefPair, ResourceBeliefs};
use crate::error::{Error, Result};
use crate::numeric::{dot, norm_sq, VarClamp};

/// Stopping controls shared by all pursuit variants.
#[derive(Debug, Clone, Copy)]
pub struct OmpConfig {
    /// Hard cap on selected atoms.
    pub max_atoms: usize,
    /// Stop once the residual norm drops to this level. Zero disables.
    pub residual_tol: f64,
}

impl OmpConfig {
    pub fn new(max_atoms: usize) -> Result<Self> {
        if max_atoms == 0 {
            return Err(Error::Config("pursuit needs max_atoms >= 1".into()));
        }
        Ok(Self {
            max_atoms,
            residual_tol: 0.0,
        })
    }
}

/// Plain orthogonal matching pursuit on a dense dictionary.
///
/// Selection maximizes |column . residual|; the active-set coefficients are
/// refit each iteration and the residual is recomputed from the refit. A
/// rank-deficient active set drops the newest atom and stops.
pub fn omp(
    y: &[f64],
    dict: &DMatrix<f64>,
    cfg: &OmpConfig,
    counter: &OpCounter,
) -> Result<Vec<f64>> {
    let (m, n) = (dict.nrows(), dict.ncols());
    if y.len() != m {
        return Err(Error::Dimension {
            what: "omp observation",
            expected: m,
            got: y.len(),
        });
    }
    let mut out = vec![0.0; n];
    let mut residual = y.to_vec();
    let mut atoms: Vec<usize> = Vec::new();
    // lower-triangular Gram rows and dictionary-observation products,
    // extended lazily as atoms join
    let mut gram: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let cap = cfg.max_atoms.min(m).min(n);
    for _ in 0..cap {
        let mut best = 0.0_f64;
        let mut best_n = None;
        for j in 0..n {
            if atoms.contains(&j) {
                continue;
            }
            let c = dot(dict.column(j).as_slice(), &residual).abs();
            if c > best {
                best = c;
                best_n = Some(j);
            }
        }
        counter.add(((n - atoms.len()) * m) as u64);
        let Some(j) = best_n else { break };
        if best == 0.0 || !best.is_finite() {
            break;
        }

        atoms.push(j);
        let mut row = Vec::with_capacity(atoms.len());
        for &i in &atoms {
            row.push(dot(dict.column(i).as_slice(), dict.column(j).as_slice()));
        }
        counter.add((atoms.len() * m) as u64);
        gram.push(row);
        rhs.push(dot(dict.column(j).as_slice(), y));
        counter.add(m as u64);

        match solve_active(&gram, &rhs, counter) {
            Some(b) => beta = b,
            None => {
                atoms.pop();
                gram.pop();
                rhs.pop();
                break;
            }
        }

        residual.copy_from_slice(y);
        for (&i, &b) in atoms.iter().zip(&beta) {
            for (r, v) in residual.iter_mut().zip(dict.column(i).iter()) {
                *r -= b * v;
            }
        }
        counter.add((atoms.len() * m) as u64);
        if cfg.residual_tol > 0.0 && norm_sq(&residual).sqrt() <= cfg.residual_tol {
            break;
        }
    }
    for (&i, &b) in atoms.iter().zip(&beta) {
        out[i] = b;
    }
    Ok(out)
}

// Cholesky solve of the symmetric active-set system, built fresh each call.
fn solve_active(gram: &[Vec<f64>], rhs: &[f64], counter: &OpCounter) -> Option<Vec<f64>> {
    let i = gram.len();
    let mat = DMatrix::from_fn(i, i, |r, c| if c <= r { gram[r][c] } else { gram[c][r] });
    counter.add((i * i * i) as u64 / 6 + 2 * (i * i) as u64);
    let chol = Cholesky::new(mat)?;
    let sol = chol.solve(&DVector::from_column_slice(rhs));
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(sol.iter().copied().collect())
}

/// One-shot MMSE detection followed by per-device OMP with `s` atoms.
pub fn lmmse_omp(
    y: &DMatrix<f64>,
    h_eff: &DMatrix<f64>,
    sigma2: f64,
    a: &MeasurementMatrix,
    powers: &[f64],
    s: usize,
    counter: &OpCounter,
) -> Result<Vec<Vec<f64>>> {
    let (u, k) = (h_eff.nrows(), h_eff.ncols());
    let m = a.rows();
    if y.nrows() != u || y.ncols() != m {
        return Err(Error::Dimension {
            what: "lmmse_omp observation",
            expected: u * m,
            got: y.nrows() * y.ncols(),
        });
    }
    if powers.len() != k {
        return Err(Error::Dimension {
            what: "lmmse_omp powers",
            expected: k,
            got: powers.len(),
        });
    }
    let mut x_ext = vec![vec![0.0; m]; k];
    for mm in 0..m {
        let pairs: Vec<BeliefPair> = powers
            .iter()
            .map(|&p| BeliefPair {
                mean: 0.0,
                var: 1.0 / p,
            })
            .collect();
        let post = mmse_detect(
            &DVector::from_column_slice(y.column(mm).as_slice()),
            h_eff,
            &ResourceBeliefs::prior(pairs.clone()),
            sigma2,
            counter,
        )?;
        for kk in 0..k {
            let (e, _) = extrinsic(post.pairs[kk], pairs[kk], VarClamp::DEFAULT);
            x_ext[kk][mm] = e.mean;
        }
    }
    let cfg = OmpConfig::new(s)?;
    let results: Vec<Result<Vec<f64>>> = x_ext
        .par_iter()
        .map(|xk| omp(xk, a.matrix(), &cfg, counter))
        .collect();
    results.into_iter().collect()
}

// Joint least-squares state over rank-one atoms h̃_k c_nᵀ. Gram entries
// factor as (h̃_k . h̃_k')(c_n . c_n'); the channel part comes from a table
// and the dictionary part is computed when an atom joins.
struct RankOneLs<'m> {
    h_eff: &'m DMatrix<f64>,
    a: &'m MeasurementMatrix,
    gh: DMatrix<f64>,
    atoms: Vec<(usize, usize)>,
    gram: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl<'m> RankOneLs<'m> {
    fn new(h_eff: &'m DMatrix<f64>, a: &'m MeasurementMatrix, counter: &OpCounter) -> Self {
        let gh = h_eff.transpose() * h_eff;
        let k = h_eff.ncols();
        counter.add((k * k * h_eff.nrows()) as u64);
        Self {
            h_eff,
            a,
            gh,
            atoms: Vec::new(),
            gram: Vec::new(),
            rhs: Vec::new(),
        }
    }

    fn add_atom(&mut self, k: usize, n: usize, y: &DMatrix<f64>, counter: &OpCounter) {
        let m = self.a.rows();
        let u = self.h_eff.nrows();
        self.atoms.push((k, n));
        let mut row = Vec::with_capacity(self.atoms.len());
        for &(kj, nj) in &self.atoms {
            row.push(self.gh[(k, kj)] * dot(self.a.col(n), self.a.col(nj)));
        }
        counter.add((self.atoms.len() * (m + 1)) as u64);
        self.gram.push(row);
        // <Y, h̃_k c_nᵀ> = h̃_kᵀ Y c_n
        let t = self.h_eff.column(k).transpose() * y;
        let r = dot(t.transpose().as_slice(), self.a.col(n));
        counter.add((u * m + m) as u64);
        self.rhs.push(r);
    }

    fn drop_newest(&mut self) {
        self.atoms.pop();
        self.gram.pop();
        self.rhs.pop();
    }

    fn solve(&self, counter: &OpCounter) -> Option<Vec<f64>> {
        solve_active(&self.gram, &self.rhs, counter)
    }

    fn residual(&self, y: &DMatrix<f64>, beta: &[f64], counter: &OpCounter) -> DMatrix<f64> {
        let (u, m) = (y.nrows(), y.ncols());
        let mut res = y.clone();
        for (&(k, n), &b) in self.atoms.iter().zip(beta) {
            let w = self.h_eff.column(k) * b;
            let c = self.a.col(n);
            for mm in 0..m {
                let cm = c[mm];
                for uu in 0..u {
                    res[(uu, mm)] -= w[uu] * cm;
                }
            }
        }
        counter.add((self.atoms.len() * (u + u * m)) as u64);
        res
    }

    fn scatter(&self, beta: &[f64], n: usize, k: usize) -> Vec<Vec<f64>> {
        let mut g = vec![vec![0.0; n]; k];
        for (&(kk, nn), &b) in self.atoms.iter().zip(beta) {
            g[kk][nn] = b;
        }
        g
    }
}

fn joint_pursuit<F>(
    y: &DMatrix<f64>,
    h_eff: &DMatrix<f64>,
    a: &MeasurementMatrix,
    cfg: &OmpConfig,
    counter: &OpCounter,
    mut correlate: F,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&DMatrix<f64>, &OpCounter) -> DMatrix<f64>,
{
    let (u, k) = (h_eff.nrows(), h_eff.ncols());
    let (m, n) = (a.rows(), a.cols());
    if y.nrows() != u || y.ncols() != m {
        return Err(Error::Dimension {
            what: "joint pursuit observation",
            expected: u * m,
            got: y.nrows() * y.ncols(),
        });
    }
    let a_norms: Vec<f64> = (0..n).map(|j| norm_sq(a.col(j)).sqrt()).collect();
    counter.add((n * m) as u64);
    let mut ls = RankOneLs::new(h_eff, a, counter);
    let h_norms: Vec<f64> = (0..k).map(|j| ls.gh[(j, j)].sqrt()).collect();

    let mut res = y.clone();
    let mut beta: Vec<f64> = Vec::new();
    let mut active = vec![false; k * n];
    let cap = cfg.max_atoms.min(k * n).min(u * m);
    for _ in 0..cap {
        // raw correlations of every atom with the residual, then normalize
        let corr = correlate(&res, counter);
        let mut best = 0.0_f64;
        let mut pick = None;
        for kk in 0..k {
            for nn in 0..n {
                if active[kk * n + nn] {
                    continue;
                }
                let denom = h_norms[kk] * a_norms[nn];
                if denom == 0.0 {
                    continue;
                }
                let score = corr[(kk, nn)].abs() / denom;
                if score > best {
                    best = score;
                    pick = Some((kk, nn));
                }
            }
        }
        counter.add(2 * (k * n - ls.atoms.len()) as u64);
        let Some((kk, nn)) = pick else { break };
        if best == 0.0 || !best.is_finite() {
            break;
        }
        active[kk * n + nn] = true;
        ls.add_atom(kk, nn, y, counter);
        match ls.solve(counter) {
            Some(b) => beta = b,
            None => {
                ls.drop_newest();
                break;
            }
        }
        res = ls.residual(y, &beta, counter);
        if cfg.residual_tol > 0.0 && res.norm() <= cfg.residual_tol {
            break;
        }
    }
    Ok(ls.scatter(&beta, n, k))
}

/// Joint pursuit over rank-one atoms with batched correlations: every
/// iteration forms H̃ᵀ Res A once and reads all K·N scores from it.
pub fn omp_2d(
    y: &DMatrix<f64>,
    h_eff: &DMatrix<f64>,
    a: &MeasurementMatrix,
    cfg: &OmpConfig,
    counter: &OpCounter,
) -> Result<Vec<Vec<f64>>> {
    let (u, k) = (h_eff.nrows(), h_eff.ncols());
    let (m, n) = (a.rows(), a.cols());
    joint_pursuit(y, h_eff, a, cfg, counter, |res, c| {
        let left = h_eff.transpose() * res;
        let corr = &left * a.matrix();
        c.add((k * u * m + k * m * n) as u64);
        corr
    })
}

/// Same pursuit in flattened-operator form: each correlation is evaluated
/// independently as h̃_kᵀ Res c_n with nothing shared between atoms. The
/// selection rule and refit match `omp_2d`; only the work accounting
/// differs. Returns the estimates flattened with device index fastest.
pub fn kron_omp(
    y: &DMatrix<f64>,
    h_eff: &DMatrix<f64>,
    a: &MeasurementMatrix,
    cfg: &OmpConfig,
    counter: &OpCounter,
) -> Result<Vec<f64>> {
    let (u, k) = (h_eff.nrows(), h_eff.ncols());
    let (m, n) = (a.rows(), a.cols());
    let g = joint_pursuit(y, h_eff, a, cfg, counter, |res, c| {
        let mut corr = DMatrix::zeros(k, n);
        let mut t = vec![0.0; m];
        for kk in 0..k {
            for nn in 0..n {
                let col = a.col(nn);
                for (mm, tv) in t.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for uu in 0..u {
                        s += h_eff[(uu, kk)] * res[(uu, mm)];
                    }
                    *tv = s;
                }
                corr[(kk, nn)] = dot(&t, col);
            }
        }
        c.add((k * n * (m * u + m)) as u64);
        corr
    })?;
    let mut out = vec![0.0; n * k];
    for (kk, gk) in g.iter().enumerate() {
        for (nn, &v) in gk.iter().enumerate() {
            out[nn * k + kk] = v;
        }
    }
    Ok(out)
}

//! Federated training loop over the simulated multiple-access uplink.
//!
//! Each round: devices add their carried residual to a fresh mini-batch
//! gradient, keep the largest entries per block, project and power-scale the
//! kept signal, and transmit simultaneously. The server reconstructs every
//! device's sparse update from the antenna observations, averages, and takes
//! an SGD step. An optional shadow track repeats the same schedule with
//! lossless aggregation for accuracy-gap reporting.

pub mod data;
pub mod mlp;
pub mod synthetic;

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{extrinsic_variance_direct, mse_bound_thm1, AnalysisInputs};
use crate::baselines;
use crate::channel::{self, ReceivedBlock};
use crate::compression::{
    block_sparsify, compress_block, power_scale, BlockPartition, CompressionConfig,
    CompressionState, MeasurementMatrix,
};
use crate::count::OpCounter;
use crate::error::{Error, Result};
use crate::numeric::{norm_sq, to_db};
use crate::streams::{self, label};
use crate::turbo::{self, TurboConfig};
use data::{draw_batch, partition_non_iid, Dataset, DeviceDataset};
use mlp::{MlpModel, MlpShape};

/// Server-side reconstruction algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructorKind {
    Proposed,
    LmmseOmp,
    Omp2d,
    KronOmp,
    Perfect,
}

impl ReconstructorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::LmmseOmp => "lmmse-omp",
            Self::Omp2d => "omp2d",
            Self::KronOmp => "kron-omp",
            Self::Perfect => "perfect",
        }
    }
}

impl fmt::Display for ReconstructorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReconstructorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Self::Proposed),
            "lmmse-omp" => Ok(Self::LmmseOmp),
            "omp2d" => Ok(Self::Omp2d),
            "kron-omp" => Ok(Self::KronOmp),
            "perfect" => Ok(Self::Perfect),
            other => Err(Error::Config(format!(
                "unknown reconstructor {other}, expected proposed|lmmse-omp|omp2d|kron-omp|perfect"
            ))),
        }
    }
}

/// Full description of one training run. JSON configs use exactly these
/// field names; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_devices: usize,
    pub num_antennas: usize,
    pub noise_var: f64,
    /// Compression ratio N/M.
    pub ratio: f64,
    /// Kept fraction per block.
    pub sparsity_ratio: f64,
    pub num_blocks: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub samples_per_device: usize,
    pub seed: u64,
    pub reconstructor: ReconstructorKind,
    pub turbo_iters: usize,
    pub gamp_iters: usize,
    pub gamp_tol: f64,
    /// Downlink fidelity in (0,1]; 1 broadcasts exactly.
    pub downlink_eps: f64,
    /// "synthetic", "mnist" (reads FEDCS_MNIST_DIR), or "mnist:<dir>".
    pub dataset: String,
    /// Run the lossless-aggregation track alongside and emit its rows.
    pub shadow_track: bool,
    /// Draw block membership from a seeded shuffle instead of contiguous
    /// index ranges. The shuffle spreads hot coordinates over every block,
    /// so per-block transmit energies stay near the per-device average that
    /// the power scaling and the reconstruction priors assume; with
    /// contiguous ranges a single layer can concentrate enough energy in
    /// one block to starve or saturate the others.
    pub permuted_blocks: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_devices: 32,
            num_antennas: 64,
            noise_var: 1.0,
            ratio: 5.0,
            sparsity_ratio: 0.04,
            num_blocks: 10,
            rounds: 100,
            learning_rate: 0.2,
            batch_size: 10,
            samples_per_device: 1000,
            seed: 1,
            reconstructor: ReconstructorKind::Proposed,
            turbo_iters: 2,
            gamp_iters: 30,
            gamp_tol: 1e-5,
            downlink_eps: 1.0,
            dataset: "synthetic".into(),
            shadow_track: true,
            permuted_blocks: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 || self.num_antennas == 0 {
            return Err(Error::Config("need devices and antennas".into()));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::Config("noise variance must be nonnegative".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("need at least one round".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.downlink_eps > 0.0 && self.downlink_eps <= 1.0) {
            return Err(Error::Config("downlink fidelity must lie in (0,1]".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.samples_per_device {
            return Err(Error::Config(
                "batch size must lie in 1..=samples_per_device".into(),
            ));
        }
        if self.turbo_iters == 0 || self.gamp_iters == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if !(self.gamp_tol >= 0.0) {
            return Err(Error::Config("solver tolerance must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn turbo_config(&self) -> TurboConfig {
        TurboConfig {
            iters: self.turbo_iters,
            gamp: crate::gamp::GampConfig {
                max_iters: self.gamp_iters,
                tol: self.gamp_tol,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

/// One CSV row of run output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub accuracy: f64,
    pub nmse: f64,
    pub nmse_db: f64,
    pub thm1_bound_db: f64,
    pub reconstructor: String,
    pub wallclock_ms: u64,
    pub seed: u64,
}

/// Squared reconstruction error of the aggregate, normalized by its power.
pub fn nmse(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension {
            what: "nmse operands",
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    let denom = norm_sq(truth);
    if denom == 0.0 {
        return Err(Error::DegenerateSignal);
    }
    let err: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| (t - e) * (t - e))
        .sum();
    Ok(err / denom)
}

/// In-place gradient step w <- w - eta g.
pub fn sgd_update(w: &mut [f64], g: &[f64], eta: f64) -> Result<()> {
    if w.len() != g.len() {
        return Err(Error::Dimension {
            what: "sgd operands",
            expected: w.len(),
            got: g.len(),
        });
    }
    for (wv, gv) in w.iter_mut().zip(g) {
        *wv -= eta * gv;
    }
    Ok(())
}

/// Noisy broadcast model: w' = eps w + sqrt(1-eps^2) e with per-coordinate
/// noise scale |w_i|. eps = 1 returns the weights untouched.
pub fn downlink_perturb(w: &[f64], eps: f64, seed: u64, round: u64, device: u64) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config(format!("downlink fidelity {eps} outside (0,1]")));
    }
    if eps == 1.0 {
        return Ok(w.to_vec());
    }
    let mut rng = streams::substream(seed, label::DOWNLINK, &[round, device]);
    let mut noise = vec![0.0; w.len()];
    streams::fill_standard_normal(&mut rng, &mut noise);
    let spread = (1.0 - eps * eps).sqrt();
    Ok(w.iter()
        .zip(&noise)
        .map(|(&wi, &z)| eps * wi + spread * wi.abs() * z)
        .collect())
}

/// Runs every block of one round through the selected reconstructor.
/// `true_blocks[k][b]` backs the lossless variant.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_all_blocks(
    kind: ReconstructorKind,
    received: &[ReceivedBlock],
    h_eff: &DMatrix<f64>,
    sigma2: f64,
    a: &MeasurementMatrix,
    powers: &[f64],
    ratio: f64,
    s_per_block: usize,
    seed: u64,
    round: u64,
    turbo_cfg: &TurboConfig,
    true_blocks: Option<&[Vec<Vec<f64>>]>,
    counter: &OpCounter,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = powers.len();
    let n = a.cols();
    if kind == ReconstructorKind::Perfect {
        return true_blocks
            .map(|t| t.to_vec())
            .ok_or_else(|| Error::Config("lossless reconstruction needs the true blocks".into()));
    }
    let mut per_device: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(received.len()); k];
    for rb in received {
        let estimates: Vec<Vec<f64>> = match kind {
            ReconstructorKind::Proposed => {
                turbo::grad_reconst(
                    &rb.y, h_eff, sigma2, a, powers, ratio, seed, round, rb.block, turbo_cfg,
                    counter,
                )?
                .g_hat
            }
            ReconstructorKind::LmmseOmp => {
                baselines::lmmse_omp(&rb.y, h_eff, sigma2, a, powers, s_per_block, counter)?
            }
            ReconstructorKind::Omp2d => {
                let cfg = baselines::OmpConfig::new(s_per_block * k)?;
                baselines::omp_2d(&rb.y, h_eff, a, &cfg, counter)?
            }
            ReconstructorKind::KronOmp => {
                let cfg = baselines::OmpConfig::new(s_per_block * k)?;
                let flat = baselines::kron_omp(&rb.y, h_eff, a, &cfg, counter)?;
                (0..k)
                    .map(|kk| (0..n).map(|nn| flat[nn * k + kk]).collect())
                    .collect()
            }
            ReconstructorKind::Perfect => unreachable!(),
        };
        if estimates.len() != k {
            return Err(Error::Dimension {
                what: "reconstructed devices",
                expected: k,
                got: estimates.len(),
            });
        }
        for (dev, est) in per_device.iter_mut().zip(estimates) {
            dev.push(est);
        }
    }
    Ok(per_device)
}

struct DeviceRound {
    /// Sparsified per-block update, exactly what the server should recover.
    blocks: Vec<Vec<f64>>,
    /// Scaled transmit signal and its power factor; None when the device
    /// sat the round out.
    signal: Option<(Vec<f64>, f64)>,
    /// Per-block empirical mean and variance of the sparsified update.
    mu: Vec<f64>,
    zeta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn device_step(
    w: &[f64],
    shape: MlpShape,
    train: &Dataset,
    dev: &DeviceDataset,
    state: &mut CompressionState,
    part: &BlockPartition,
    comp: &CompressionConfig,
    a: &MeasurementMatrix,
    cfg: &ExperimentConfig,
    round: u64,
    device: u64,
) -> Result<DeviceRound> {
    let w_local = downlink_perturb(w, cfg.downlink_eps, cfg.seed, round, device)?;
    let model = MlpModel::from_params(shape, w_local)?;
    let picks = draw_batch(
        dev.indices.len(),
        cfg.batch_size,
        cfg.seed,
        round,
        device,
    )?;
    let images: Vec<(Vec<f64>, u8)> = picks
        .iter()
        .map(|&p| {
            let idx = dev.indices[p];
            (train.image(idx), train.label(idx))
        })
        .collect();
    let batch: Vec<(&[f64], u8)> = images.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
    let (_, mut grad) = model.loss_and_gradient(&batch)?;

    // error feedback: fold in what previous rounds dropped
    for (g, r) in grad.iter_mut().zip(&state.residual) {
        *g += r;
    }
    let blocks = block_sparsify(&grad, state, part, comp.sparsity());

    let m = comp.measure_dim();
    let mut x_full = Vec::with_capacity(comp.total_measure_dim());
    for blk in &blocks {
        x_full.extend(compress_block(blk, a)?);
    }
    let signal = match power_scale(&x_full, comp.total_measure_dim()) {
        Ok((scaled, p)) => {
            state.power = Some(p);
            Some((scaled, p))
        }
        Err(Error::DegenerateSignal) => {
            // nothing to send: keep the whole update for next round
            for (b, blk) in blocks.iter().enumerate() {
                for (pos, &idx) in part.index_set(b).iter().enumerate() {
                    if idx < state.residual.len() {
                        state.residual[idx] = blk[pos];
                    }
                }
            }
            state.power = None;
            None
        }
        Err(e) => return Err(e),
    };
    debug_assert_eq!(x_full.len(), m * comp.num_blocks);

    let nb = comp.num_blocks;
    let nd = comp.block_dim() as f64;
    let mut mu = Vec::with_capacity(nb);
    let mut zeta = Vec::with_capacity(nb);
    for blk in &blocks {
        let mean: f64 = blk.iter().sum::<f64>() / nd;
        let var: f64 = blk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nd;
        mu.push(mean);
        zeta.push(var);
    }
    Ok(DeviceRound {
        blocks,
        signal,
        mu,
        zeta,
    })
}

/// Per-round inputs for the closed-form bound, written next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundAnalysisDump {
    pub round: u64,
    pub sigma2: f64,
    pub ratio: f64,
    pub block_dim: usize,
    /// Channel rows (antenna-major), all devices.
    pub h: Vec<Vec<f64>>,
    pub powers: Vec<f64>,
    pub zeta: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub g_avg_norm_sq: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnalysisDump {
    pub rounds: Vec<RoundAnalysisDump>,
}

impl RoundAnalysisDump {
    pub fn to_inputs(&self) -> AnalysisInputs {
        let u = self.h.len();
        let k = self.powers.len();
        AnalysisInputs {
            h: DMatrix::from_fn(u, k, |r, c| self.h[r][c]),
            powers: self.powers.clone(),
            sigma2: self.sigma2,
            ratio: self.ratio,
            block_dim: self.block_dim,
            zeta: self.zeta.clone(),
            mu: self.mu.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Reconstruction-error bound normalized by the aggregate power, in dB.
    pub fn bound_db(&self) -> Result<f64> {
        let inputs = self.to_inputs();
        let (k, b) = (self.powers.len(), self.zeta[0].len());
        let mut nu = vec![vec![0.0; b]; k];
        for kk in 0..k {
            for bb in 0..b {
                if self.zeta[kk][bb] > 0.0 {
                    nu[kk][bb] = extrinsic_variance_direct(&inputs, kk, bb)?;
                }
            }
        }
        let bound = mse_bound_thm1(&inputs, &nu)?;
        if self.g_avg_norm_sq == 0.0 {
            return Ok(f64::NAN);
        }
        Ok(to_db(bound / self.g_avg_norm_sq))
    }
}

/// Everything a finished run hands back.
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub final_params: Vec<f64>,
    pub mults: u64,
    pub dump: AnalysisDump,
}

fn resolve_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    if cfg.dataset == "synthetic" {
        return Ok(data::synthetic_dataset(cfg.seed));
    }
    if cfg.dataset == "mnist" {
        let dir = std::env::var("FEDCS_MNIST_DIR")
            .map_err(|_| Error::Config("dataset \"mnist\" needs FEDCS_MNIST_DIR set".into()))?;
        return data::load_mnist_dir(Path::new(&dir));
    }
    if let Some(dir) = cfg.dataset.strip_prefix("mnist:") {
        return data::load_mnist_dir(Path::new(dir));
    }
    Err(Error::Config(format!(
        "unknown dataset {:?}, expected \"synthetic\", \"mnist\", or \"mnist:<dir>\"",
        cfg.dataset
    )))
}

fn accuracy(model: &MlpModel, test: &Dataset) -> f64 {
    let mut buf = vec![0.0; test.dim()];
    let mut hits = 0usize;
    for i in 0..test.len() {
        test.image_into(i, &mut buf);
        if model.predict(&buf) == test.label(i) {
            hits += 1;
        }
    }
    hits as f64 / test.len() as f64
}

/// Executes a full training run. CSV rows stream to `csv_out` as rounds
/// finish; the analysis dump goes to `dump_out` at the end.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    csv_out: Option<&Path>,
    dump_out: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = resolve_dataset(cfg)?;
    let shape = MlpShape::new(train.dim(), 20, 10)?;
    let total_dim = shape.dim();
    let comp = CompressionConfig::new(total_dim, cfg.num_blocks, cfg.ratio, cfg.sparsity_ratio)?;
    if comp.sparsity() == 0 {
        return Err(Error::Config(
            "sparsity ratio keeps zero entries per block".into(),
        ));
    }
    let part = if cfg.permuted_blocks {
        BlockPartition::permuted(&comp, cfg.seed)
    } else {
        BlockPartition::contiguous(&comp)
    };
    let devices = partition_non_iid(&train, cfg.num_devices, cfg.samples_per_device, cfg.seed)?;
    let mut states: Vec<CompressionState> =
        (0..cfg.num_devices).map(|_| CompressionState::new(total_dim)).collect();
    let mut shadow_states = if cfg.shadow_track {
        Some(
            (0..cfg.num_devices)
                .map(|_| CompressionState::new(total_dim))
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut model = MlpModel::init(shape, cfg.seed);
    let mut shadow_model = cfg.shadow_track.then(|| model.clone());
    let turbo_cfg = cfg.turbo_config();
    let counter = OpCounter::new();
    let k = cfg.num_devices;
    let weights = vec![1.0 / k as f64; k];

    let mut writer = match csv_out {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    let mut metrics = Vec::new();
    let mut dump = AnalysisDump::default();
    let mut record = |row: RoundMetrics, writer: &mut Option<csv::Writer<std::fs::File>>| -> Result<()> {
        if let Some(w) = writer {
            w.serialize(&row)?;
            w.flush()?;
        }
        metrics.push(row);
        Ok(())
    };

    for t in 1..=cfg.rounds as u64 {
        let start = Instant::now();
        let a = MeasurementMatrix::generate(cfg.seed, t, comp.measure_dim(), comp.block_dim());

        let rounds: Vec<Result<DeviceRound>> = devices
            .par_iter()
            .zip(states.par_iter_mut())
            .enumerate()
            .map(|(kk, (dev, state))| {
                device_step(
                    &model.w, shape, &train, dev, state, &part, &comp, &a, cfg, t, kk as u64,
                )
            })
            .collect();
        let rounds: Vec<DeviceRound> = rounds.into_iter().collect::<Result<_>>()?;

        // lossless aggregate over every device, the reconstruction target
        let true_blocks: Vec<Vec<Vec<f64>>> =
            rounds.iter().map(|r| r.blocks.clone()).collect();
        let g_avg = turbo::assemble_global(&true_blocks, &part, &weights, total_dim)?;
        let g_avg_norm = norm_sq(&g_avg);

        let active: Vec<usize> = (0..k).filter(|&kk| rounds[kk].signal.is_some()).collect();
        let h_full = channel::sample_channel(cfg.seed, t, cfg.num_antennas, k);

        let g_hat_avg = if active.is_empty() {
            vec![0.0; total_dim]
        } else {
            let h_active = DMatrix::from_fn(cfg.num_antennas, active.len(), |r, c| {
                h_full[(r, active[c])]
            });
            let signals: Vec<Vec<f64>> = active
                .iter()
                .map(|&kk| rounds[kk].signal.as_ref().expect("active").0.clone())
                .collect();
            let powers: Vec<f64> = active
                .iter()
                .map(|&kk| rounds[kk].signal.as_ref().expect("active").1)
                .collect();
            let y = channel::transmit(&h_active, &signals, cfg.noise_var, cfg.seed, t)?;
            let received = channel::assemble_blocks(&y, comp.num_blocks, comp.measure_dim())?;
            let h_eff = channel::effective_channel(&h_active, &powers);
            let active_truth: Vec<Vec<Vec<f64>>> = active
                .iter()
                .map(|&kk| true_blocks[kk].clone())
                .collect();
            let estimates = reconstruct_all_blocks(
                cfg.reconstructor,
                &received,
                &h_eff,
                cfg.noise_var,
                &a,
                &powers,
                cfg.ratio,
                comp.sparsity(),
                cfg.seed,
                t,
                &turbo_cfg,
                Some(&active_truth),
                &counter,
            )?;
            let mut full: Vec<Vec<Vec<f64>>> =
                vec![vec![vec![0.0; comp.block_dim()]; comp.num_blocks]; k];
            for (pos, &kk) in active.iter().enumerate() {
                full[kk] = estimates[pos].clone();
            }
            turbo::assemble_global(&full, &part, &weights, total_dim)?
        };

        let (round_nmse, round_nmse_db) = if g_avg_norm == 0.0 {
            (0.0, f64::NEG_INFINITY)
        } else {
            let e = nmse(&g_avg, &g_hat_avg)?;
            (e, to_db(e))
        };

        // closed-form bound with genie statistics; idle devices carry zero
        // variance and drop out of the sums
        let round_dump = RoundAnalysisDump {
            round: t,
            sigma2: cfg.noise_var.max(f64::MIN_POSITIVE),
            ratio: cfg.ratio,
            block_dim: comp.block_dim(),
            h: (0..cfg.num_antennas)
                .map(|r| (0..k).map(|c| h_full[(r, c)]).collect())
                .collect(),
            powers: (0..k)
                .map(|kk| rounds[kk].signal.as_ref().map_or(1.0, |s| s.1))
                .collect(),
            zeta: (0..k)
                .map(|kk| {
                    if rounds[kk].signal.is_some() {
                        rounds[kk].zeta.clone()
                    } else {
                        vec![0.0; comp.num_blocks]
                    }
                })
                .collect(),
            mu: (0..k).map(|kk| rounds[kk].mu.clone()).collect(),
            weights: weights.clone(),
            g_avg_norm_sq: g_avg_norm,
        };
        let bound_db = round_dump.bound_db()?;

        sgd_update(&mut model.w, &g_hat_avg, cfg.learning_rate)?;
        let acc = accuracy(&model, &test);
        let elapsed = start.elapsed().as_millis() as u64;

        record(
            RoundMetrics {
                round: t,
                accuracy: acc,
                nmse: round_nmse,
                nmse_db: round_nmse_db,
                thm1_bound_db: bound_db,
                reconstructor: cfg.reconstructor.name().into(),
                wallclock_ms: elapsed,
                seed: cfg.seed,
            },
            &mut writer,
        )?;
        dump.rounds.push(round_dump);

        if let (Some(sm), Some(ss)) = (shadow_model.as_mut(), shadow_states.as_mut()) {
            let srounds: Vec<Result<DeviceRound>> = devices
                .par_iter()
                .zip(ss.par_iter_mut())
                .enumerate()
                .map(|(kk, (dev, state))| {
                    device_step(
                        &sm.w, shape, &train, dev, state, &part, &comp, &a, cfg, t, kk as u64,
                    )
                })
                .collect();
            let srounds: Vec<DeviceRound> = srounds.into_iter().collect::<Result<_>>()?;
            let sblocks: Vec<Vec<Vec<f64>>> =
                srounds.into_iter().map(|r| r.blocks).collect();
            let sg_avg = turbo::assemble_global(&sblocks, &part, &weights, total_dim)?;
            sgd_update(&mut sm.w, &sg_avg, cfg.learning_rate)?;
            let sacc = accuracy(sm, &test);
            record(
                RoundMetrics {
                    round: t,
                    accuracy: sacc,
                    nmse: 0.0,
                    nmse_db: f64::NEG_INFINITY,
                    thm1_bound_db: f64::NAN,
                    reconstructor: ReconstructorKind::Perfect.name().into(),
                    wallclock_ms: 0,
                    seed: cfg.seed,
                },
                &mut writer,
            )?;
        }
    }

    if let Some(p) = dump_out {
        let mut f = std::fs::File::create(p)?;
        f.write_all(serde_json::to_string_pretty(&dump)?.as_bytes())?;
    }
    Ok(RunOutput {
        metrics,
        final_params: model.w,
        mults: counter.total(),
        dump,
    })
}

/// Reads back a metrics CSV produced by `run_experiment`.
pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Recomputes bound columns from a run's analysis dump and writes a copy of
/// the main-track metrics with the recomputed values appended.
pub fn append_bounds(run_csv: &Path, dump_json: &Path, out_csv: &Path) -> Result<()> {
    let metrics = read_metrics(run_csv)?;
    let text = std::fs::read_to_string(dump_json)?;
    let dump: AnalysisDump = serde_json::from_str(&text)?;
    let mut w = csv::Writer::from_path(out_csv)?;
    w.write_record([
        "round",
        "accuracy",
        "nmse",
        "nmse_db",
        "thm1_bound_db",
        "reconstructor",
        "wallclock_ms",
        "seed",
        "thm1_bound_db_check",
        "mean_detector_noise_var",
    ])?;
    for rd in &dump.rounds {
        let Some(row) = metrics
            .iter()
            .find(|m| m.round == rd.round && m.reconstructor != "perfect")
        else {
            return Err(Error::Framing(format!(
                "dump round {} missing from metrics", rd.round
            )));
        };
        let check = rd.bound_db()?;
        let inputs = rd.to_inputs();
        let mut nus = Vec::new();
        for kk in 0..rd.powers.len() {
            for bb in 0..rd.zeta[kk].len() {
                if rd.zeta[kk][bb] > 0.0 {
                    nus.push(extrinsic_variance_direct(&inputs, kk, bb)?);
                }
            }
        }
        let mean_nu = if nus.is_empty() {
            f64::NAN
        } else {
            nus.iter().sum::<f64>() / nus.len() as f64
        };
        w.write_record([
            row.round.to_string(),
            row.accuracy.to_string(),
            row.nmse.to_string(),
            row.nmse_db.to_string(),
            row.thm1_bound_db.to_string(),
            row.reconstructor.clone(),
            row.wallclock_ms.to_string(),
            row.seed.to_string(),
            check.to_string(),
            mean_nu.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

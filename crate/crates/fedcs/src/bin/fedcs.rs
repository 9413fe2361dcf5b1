use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedcs::error::Result;
use fedcs::fl::synthetic::{reconstruct_bench, BenchConfig};
use fedcs::fl::{append_bounds, run_experiment, ExperimentConfig, ReconstructorKind};
use fedcs::turbo::TurboConfig;

#[derive(Parser)]
#[command(
    name = "fedcs",
    version,
    about = "Federated learning over a simulated MIMO multiple-access uplink"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training experiment from a JSON config and write metrics CSV
    Run(RunArgs),
    /// Reconstruction-only benchmark on synthetic gradients
    ReconstructBench(BenchArgs),
    /// Recompute bound columns for a finished run from its analysis dump
    Analyze(AnalyzeArgs),
    /// Run every reconstructor on the same synthetic task and compare
    Baselines(BaselinesArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with ExperimentConfig fields; unknown keys are rejected
    #[arg(long)]
    config: PathBuf,
    /// Metrics CSV destination
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config reconstructor
    #[arg(long)]
    reconstructor: Option<ReconstructorKind>,
    /// Also write per-round channel and variance statistics as JSON
    #[arg(long)]
    dump_analysis: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "proposed")]
    reconstructor: ReconstructorKind,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    devices: usize,
    #[arg(long, default_value_t = 64)]
    antennas: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_var: f64,
    #[arg(long, default_value_t = 5.0)]
    ratio: f64,
    #[arg(long, default_value_t = 0.04)]
    sparsity_ratio: f64,
    /// Block count; defaults to the reconstructor's usual operating point
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long, default_value_t = 15910)]
    total_dim: usize,
    #[arg(long, default_value_t = 2)]
    turbo_iters: usize,
    #[arg(long, default_value_t = 30)]
    gamp_iters: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Metrics CSV produced by `run`
    #[arg(long)]
    run: PathBuf,
    /// Analysis dump from `run --dump-analysis`; defaults to <run>.json
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Output CSV; defaults to <run>.analyzed.csv
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselinesArgs {
    /// Optional ExperimentConfig JSON supplying system parameters
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient dimension before blocking
    #[arg(long, default_value_t = 15910)]
    total_dim: usize,
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::from_json_file(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.reconstructor {
        cfg.reconstructor = r;
    }
    let out = run_experiment(&cfg, Some(&args.out), args.dump_analysis.as_deref())?;
    let main_rows: Vec<_> = out
        .metrics
        .iter()
        .filter(|m| m.reconstructor == cfg.reconstructor.name())
        .collect();
    let final_acc = main_rows.last().map_or(f64::NAN, |m| m.accuracy);
    let mean_db = main_rows.iter().map(|m| m.nmse_db).sum::<f64>() / main_rows.len() as f64;
    println!("rounds: {}", cfg.rounds);
    println!("reconstructor: {}", cfg.reconstructor);
    println!("final accuracy: {final_acc:.4}");
    println!("mean nmse_db: {mean_db:.2}");
    println!("server multiplies: {}", out.mults);
    println!("wrote {}", args.out.display());
    if let Some(d) = &args.dump_analysis {
        println!("wrote {}", d.display());
    }
    Ok(())
}

fn bench_config(args: &BenchArgs) -> BenchConfig {
    let mut cfg = BenchConfig::for_reconstructor(args.reconstructor);
    cfg.num_devices = args.devices;
    cfg.num_antennas = args.antennas;
    cfg.noise_var = args.noise_var;
    cfg.ratio = args.ratio;
    cfg.sparsity_ratio = args.sparsity_ratio;
    if let Some(b) = args.blocks {
        cfg.num_blocks = b;
    }
    cfg.total_dim = args.total_dim;
    cfg.rounds = args.rounds;
    cfg.seed = args.seed;
    cfg.turbo = TurboConfig {
        iters: args.turbo_iters,
        gamp: fedcs::gamp::GampConfig {
            max_iters: args.gamp_iters,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg
}

fn print_bench(kind: ReconstructorKind, rep: &fedcs::fl::synthetic::BenchReport) {
    println!("reconstructor: {kind}");
    println!(
        "geometry: block_dim {} measure_dim {} sparsity {}",
        rep.block_dim, rep.measure_dim, rep.sparsity
    );
    for (i, v) in rep.nmse.iter().enumerate() {
        println!("round {} nmse_db: {:.3}", i + 1, fedcs::numeric::to_db(*v));
    }
    println!("mean nmse_db: {:.3}", rep.nmse_db_mean);
    println!(
        "server multiplies per round: {}",
        rep.mults / rep.nmse.len().max(1) as u64
    );
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = bench_config(args);
    let rep = reconstruct_bench(&cfg)?;
    print_bench(args.reconstructor, &rep);
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let dump = args
        .dump
        .clone()
        .unwrap_or_else(|| args.run.with_extension("json"));
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.with_extension("analyzed.csv"));
    append_bounds(&args.run, &dump, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_baselines(args: &BaselinesArgs) -> Result<()> {
    let sys = match &args.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    for kind in [
        ReconstructorKind::Proposed,
        ReconstructorKind::LmmseOmp,
        ReconstructorKind::Omp2d,
        ReconstructorKind::KronOmp,
    ] {
        let mut cfg = BenchConfig::for_reconstructor(kind);
        cfg.num_devices = sys.num_devices;
        cfg.num_antennas = sys.num_antennas;
        cfg.noise_var = sys.noise_var;
        cfg.ratio = sys.ratio;
        cfg.sparsity_ratio = sys.sparsity_ratio;
        cfg.total_dim = args.total_dim;
        cfg.rounds = args.rounds;
        cfg.seed = args.seed.unwrap_or(sys.seed);
        cfg.turbo = TurboConfig {
            iters: sys.turbo_iters,
            gamp: fedcs::gamp::GampConfig {
                max_iters: sys.gamp_iters,
                tol: sys.gamp_tol,
                ..Default::default()
            },
            ..Default::default()
        };
        let rep = reconstruct_bench(&cfg)?;
        println!(
            "{:<10} blocks {:>4} mean nmse_db {:>9.3} multiplies/round {}",
            kind.name(),
            cfg.num_blocks,
            rep.nmse_db_mean,
            rep.mults / args.rounds.max(1) as u64
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::ReconstructBench(a) => cmd_bench(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Baselines(a) => cmd_baselines(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

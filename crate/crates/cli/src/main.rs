use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sulreg::bench::{run_benchmark, summarize, write_csv, write_summary, SuiteConfig};
use sulreg::io;
use sulreg::metrics::evaluate;
use sulreg::ransac::{compute_inliers, run_registration, RansacConfig};
use sulreg::sus::SigmaMode;
use sulreg::synth::{synthesize_pair, SurfaceModel, SyntheticSpec};
use sulreg::Error;

#[derive(Parser)]
#[command(name = "sulreg", version, about = "Dual-RANSAC rigid point-cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a source cloud onto a target cloud from putative correspondences.
    Register(RegisterArgs),
    /// Write a synthetic pair with ground truth.
    Synth(SynthArgs),
    /// Run the seeded synthetic benchmark.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RansacArgs {
    /// Inlier residual threshold.
    #[arg(long, default_value_t = 0.01)]
    tr: f64,
    #[arg(long, default_value_t = 5)]
    rmax: usize,
    /// Percent of local line vectors drawn per local run.
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// Percent of that subset drawn per hypothesis.
    #[arg(long, default_value_t = 30.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.995)]
    confidence: f64,
    /// Noise bound of the rotation solver and translation tolerance.
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long = "k-normals", default_value_t = 20)]
    k_normals: usize,
    #[arg(long = "max-local-iterations", default_value_t = 10_000)]
    max_local_iterations: usize,
    /// per-eval, per-round or fixed-half-Tr.
    #[arg(long = "sigma-mode", default_value = "per-eval")]
    sigma_mode: SigmaMode,
    /// Disable the angle-histogram and length-preservation filters.
    #[arg(long = "no-ahs-lvlp")]
    no_ahs_lvlp: bool,
    /// Disable the self-update of the local sets.
    #[arg(long = "no-sus")]
    no_sus: bool,
}

impl RansacArgs {
    fn config(&self, seed: u64) -> RansacConfig {
        RansacConfig {
            residual_threshold: self.tr,
            confidence_target: self.confidence,
            r_max: self.rmax,
            alpha_pct: self.alpha,
            beta_pct: self.beta,
            noise_bound: self.tau,
            rng_seed: seed,
            max_local_iterations: self.max_local_iterations,
            k_normals: self.k_normals,
            ahs_lvlp: !self.no_ahs_lvlp,
            sus: !self.no_sus,
            sigma_mode: self.sigma_mode,
            ..RansacConfig::default()
        }
    }
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    corr: PathBuf,
    /// Ground-truth transform JSON; adds metrics to the output.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write angle and scale-ratio histograms as CSV into this directory.
    #[arg(long = "dump-histograms")]
    dump_histograms: Option<PathBuf>,
    /// Write per-round self-update decisions as CSV into this directory.
    #[arg(long = "dump-sus")]
    dump_sus: Option<PathBuf>,
    #[command(flatten)]
    ransac: RansacArgs,
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long, default_value_t = 1000)]
    points: usize,
    #[arg(long, default_value_t = 500)]
    corrs: usize,
    #[arg(long, default_value_t = 0.003)]
    noise: f64,
    #[arg(long = "rotation-deg", default_value_t = 30.0)]
    rotation_deg: f64,
    #[arg(long, default_value_t = 0.3)]
    translation: f64,
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
    /// random-blobs or multi-plane.
    #[arg(long, default_value = "random-blobs")]
    surface: SurfaceModel,
}

impl SceneArgs {
    fn spec(&self, outlier_rate: f64, residual_threshold: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_points: self.points,
            n_correspondences: self.corrs,
            outlier_rate,
            noise_sigma: self.noise,
            rotation_magnitude_deg: self.rotation_deg,
            translation_magnitude: self.translation,
            scene_extent: self.extent,
            surface_model: self.surface,
            residual_threshold,
            seed,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long = "outlier-rate")]
    outlier_rate: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Threshold that separates inlier and outlier labels.
    #[arg(long, default_value_t = 0.01)]
    tr: f64,
    #[command(flatten)]
    scene: SceneArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "outlier-rates", value_delimiter = ',', default_value = "0.5,0.7,0.8,0.9")]
    outlier_rates: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long)]
    seed: u64,
    /// Run all four filter/self-update combinations.
    #[arg(long)]
    ablate: bool,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    summary: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    ransac: RansacArgs,
}

fn register(args: RegisterArgs) -> sulreg::Result<()> {
    let source = io::load_point_cloud(&args.source)?;
    let target = io::load_point_cloud(&args.target)?;
    let corrs = io::load_correspondences(&args.corr, &source, &target)?;
    let gt = args.gt.as_ref().map(io::load_transform).transpose()?;
    let cfg = args.ransac.config(args.seed);

    let start = Instant::now();
    let result = run_registration(&corrs, &source, &target, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();

    let metrics = match gt {
        Some(gt) => {
            let truth = compute_inliers(&gt, &corrs, cfg.residual_threshold);
            Some(evaluate(
                &source,
                &gt,
                &result.transform,
                &result.inlier_indices,
                &truth,
                seconds,
            )?)
        }
        None => None,
    };
    io::emit_result(&result, metrics, &args.out)?;

    if let Some(dir) = &args.dump_histograms {
        let d = &result.diagnostics;
        if let Some(h) = &d.angle_histogram {
            std::fs::write(io::output_file(dir, "angle_histogram.csv")?, h.to_csv())?;
        }
        if let Some(h) = &d.ratio_histogram {
            std::fs::write(io::output_file(dir, "ratio_histogram.csv")?, h.to_csv())?;
        }
    }
    if let Some(dir) = &args.dump_sus {
        for (round, decisions) in result.diagnostics.sus_rounds.iter().enumerate() {
            let name = format!("sus_round_{round}.csv");
            std::fs::write(io::output_file(dir, &name)?, io::sus_decisions_csv(decisions)?)?;
        }
    }
    eprintln!(
        "rounds {} iterations {} inliers {} confidence {:.6} time {:.3}s",
        result.rounds,
        result.total_iterations,
        result.inlier_indices.len(),
        result.final_confidence,
        seconds
    );
    Ok(())
}

fn synth(args: SynthArgs) -> sulreg::Result<()> {
    let spec = args.scene.spec(args.outlier_rate, args.tr, args.seed);
    let pair = synthesize_pair(&spec)?;
    let dir = &args.out_dir;
    io::write_xyz(io::output_file(dir, "source.xyz")?, &pair.source)?;
    io::write_xyz(io::output_file(dir, "target.xyz")?, &pair.target)?;
    io::write_index_correspondences(io::output_file(dir, "corr.txt")?, &pair.pairs)?;
    io::write_transform(io::output_file(dir, "gt.json")?, &pair.gt)?;
    Ok(())
}

fn bench(args: BenchArgs) -> sulreg::Result<()> {
    let suite = SuiteConfig {
        outlier_rates: args.outlier_rates.clone(),
        trials: args.trials,
        seed: args.seed,
        ablate: args.ablate,
        workers: args.workers,
        scene: args.scene.spec(0.0, args.ransac.tr, 0),
        ransac: args.ransac.config(0),
        ..SuiteConfig::default()
    };
    let rows = run_benchmark(&suite)?;
    write_csv(&args.csv, &rows)?;
    let summary = summarize(&rows);
    write_summary(&args.summary, &summary)?;
    for s in &summary {
        eprintln!(
            "outlier {:.2} ahs_lvlp {:5} sus {:5}: success {:.3}, failures {}, median rmse {}, median time {}s",
            s.outlier_rate,
            s.ahs_lvlp,
            s.sus,
            s.success_rate,
            s.failures,
            s.rmse.map_or("-".into(), |v| format!("{:.5}", v.median)),
            s.time_s.map_or("-".into(), |v| format!("{:.4}", v.median)),
        );
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 1,
        e if e.is_degenerate() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let res = match cli.command {
        Command::Register(a) => register(a),
        Command::Synth(a) => synth(a),
        Command::Bench(a) => bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

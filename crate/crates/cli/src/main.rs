use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsslam::dataset::{generate_synthetic, IntrinsicsPreset, SyntheticSpec, Trajectory};
use gsslam::eval::{ate, plot_trajectories};
use gsslam::pipeline::{exit_code, render_views, run_slam, PipelineConfig};
use gsslam::{CameraIntrinsics, SlamError};

#[derive(Parser, Debug)]
#[command(name = "gsslam", version, about = "Dense RGB-D SLAM with 3D Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track and map a TUM sequence or a synthetic scene.
    Run(RunArgs),
    /// Render views of a saved map along a TUM trajectory.
    Render(RenderArgs),
    /// Compute ATE between an estimated and a reference trajectory.
    Eval(EvalArgs),
    /// Write a synthetic sequence in TUM layout.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML configuration; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TUM RGB-D sequence directory.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Use the default synthetic scene when the config names no input.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<IntrinsicsPreset>,
    #[arg(long)]
    downsample: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct CameraArgs {
    /// JSON intrinsics file, as written by `synth`.
    #[arg(long, conflicts_with = "preset")]
    intrinsics: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<IntrinsicsPreset>,
    #[arg(long, default_value_t = 1)]
    downsample: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera-to-world poses in TUM format.
    #[arg(long)]
    trajectory: PathBuf,
    #[command(flatten)]
    camera: CameraArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Directory for a trajectory plot.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// TOML file holding a synthetic scene description.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
}

fn parse_preset(s: &str) -> Result<IntrinsicsPreset, String> {
    s.parse().map_err(|e: SlamError| e.to_string())
}

fn run(args: RunArgs) -> Result<(), SlamError> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(d) = args.dataset {
        cfg.dataset = Some(d);
        cfg.synthetic = None;
    }
    if args.synthetic && cfg.synthetic.is_none() {
        cfg.synthetic = Some(SyntheticSpec::default());
        cfg.dataset = None;
    }
    cfg.preset = args.preset.or(cfg.preset);
    cfg.downsample = args.downsample.unwrap_or(cfg.downsample);
    cfg.out = args.out.unwrap_or(cfg.out);
    cfg.max_frames = args.max_frames.or(cfg.max_frames);
    cfg.seed = args.seed.or(cfg.seed);
    cfg.threads = args.threads.unwrap_or(cfg.threads);

    let (state, report) = run_slam(&cfg).map_err(|f| f.error)?;
    println!("processed {} frames, {} keyframes, {} gaussians", state.trajectory.len(), state.keyframes.len(), state.map.len());
    if let Some(r) = report {
        if let Some(a) = r.ate_rmse {
            println!("ATE RMSE: {:.4} m", a);
        }
        println!("PSNR (training views): {:.2} dB", r.psnr_mean);
        if let Some(d) = r.depth_rmse_mean {
            println!("depth RMSE: {:.4} m", d);
        }
        if let Some(s) = r.ssim_mean {
            println!("SSIM: {:.4}", s);
        }
    }
    Ok(())
}

fn camera(args: &CameraArgs) -> Result<CameraIntrinsics, SlamError> {
    let k = match (&args.intrinsics, args.preset) {
        (Some(path), _) => {
            let body = std::fs::read_to_string(path).map_err(|e| SlamError::Config(format!("{}: {e}", path.display())))?;
            let k: CameraIntrinsics = serde_json::from_str(&body).map_err(|e| SlamError::Config(e.to_string()))?;
            k.validate()?;
            k
        }
        (None, Some(p)) => p.intrinsics(),
        (None, None) => return Err(SlamError::Config("pass --intrinsics or --preset".into())),
    };
    k.downsampled(args.downsample)
}

fn render(args: RenderArgs) -> Result<(), SlamError> {
    let k = camera(&args.camera)?;
    let traj = Trajectory::read_tum(&args.trajectory)?;
    let poses: Vec<_> = traj.entries().iter().map(|(_, p)| p.inverse()).collect();
    let n = render_views(&args.checkpoint, &poses, &k, &args.out)?;
    println!("rendered {n} views into {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), SlamError> {
    let est = Trajectory::read_tum(&args.estimate)?;
    let gt = Trajectory::read_tum(&args.reference)?;
    let result = ate(&est, &gt)?;
    println!("matched poses: {}", result.errors.len());
    println!("ATE RMSE: {:.6} m", result.rmse);
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir).map_err(|e| SlamError::Io { path: dir.clone(), source: e })?;
        plot_trajectories(&est, Some(&gt), &dir.join("trajectory.png"))?;
    }
    Ok(())
}

fn load_spec(path: &Path) -> Result<SyntheticSpec, SlamError> {
    let body = std::fs::read_to_string(path).map_err(|e| SlamError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&body).map_err(|e| SlamError::Config(e.to_string()))
}

fn synth(args: SynthArgs) -> Result<(), SlamError> {
    let mut spec = match &args.config {
        Some(p) => load_spec(p)?,
        None => SyntheticSpec::default(),
    };
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.n_frames = args.frames.unwrap_or(spec.n_frames);
    let scene = generate_synthetic(&spec)?;
    scene.export_tum(&args.out)?;
    println!("wrote {} frames to {}", scene.trajectory.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

//! The online SLAM loop and its on-disk artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_synthetic, Frame, IntrinsicsPreset, INTRINSICS_FILE, SyntheticScene, SyntheticSpec, Trajectory, TumSequence,
};
use crate::error::{Result, SlamError};
use crate::eval::{ate, depth_rmse, plot_trajectories, psnr, ssim, EvalReport, FrameMetrics};
use crate::gaussian_map::GaussianMap;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::mapper::{map_keyframe, select_keyframe, Keyframe, MappingConfig, MAP_DEPTH_MIN_SILHOUETTE};
use crate::splat_render::{render, RenderOptions};
use crate::tracker::{track_frame, TrackingConfig};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const CHECKPOINT_FILE: &str = "map.gsmap";
pub const TELEMETRY_FILE: &str = "telemetry.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// TUM sequence directory. Exactly one of `dataset` and `synthetic` is set.
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Calibration for `dataset`. When absent, the sequence's `intrinsics.json`
    /// is used, or else the preset named by the directory.
    pub preset: Option<IntrinsicsPreset>,
    /// Integer downsampling factor applied to dataset frames.
    pub downsample: usize,
    /// Maximum RGB/depth timestamp gap for association, in seconds.
    pub max_assoc_gap: f64,
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
    pub out: PathBuf,
    pub max_frames: Option<usize>,
    /// Write an intermediate checkpoint every this many keyframes (0 disables).
    pub checkpoint_every: usize,
    /// Worker threads for rendering.
    pub threads: usize,
    /// Overrides the synthetic scene seed.
    pub seed: Option<u64>,
    /// Compute SSIM per frame (needs frames of at least 11x11).
    pub ssim: bool,
    /// Write the RGB/depth/silhouette render of every keyframe.
    pub keyframe_renders: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic: None,
            preset: None,
            downsample: 1,
            max_assoc_gap: 0.02,
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
            out: PathBuf::from("out"),
            max_frames: None,
            checkpoint_every: 50,
            threads: 1,
            seed: None,
            ssim: true,
            keyframe_renders: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| SlamError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| SlamError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&body)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(SlamError::Config("set either a dataset or a synthetic scene, not both".into()))
            }
            (None, None) => return Err(SlamError::Config("no input: set a dataset or a synthetic scene".into())),
            _ => {}
        }
        if self.downsample == 0 {
            return Err(SlamError::Config("downsample must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(SlamError::Config("threads must be at least 1".into()));
        }
        if self.max_frames == Some(0) {
            return Err(SlamError::Config("max_frames must be at least 1".into()));
        }
        self.tracking.validate()?;
        self.mapping.validate()
    }
}

/// Wall-clock and loss record for one processed frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTelemetry {
    pub frame: usize,
    pub track_ms: f64,
    pub map_ms: f64,
    /// Tracking loss at the accepted pose (mapping loss for frame 0).
    pub loss: f64,
    pub n_gaussians: usize,
    pub keyframe: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunState {
    pub map: GaussianMap,
    pub keyframes: Vec<Keyframe>,
    /// Estimated camera-to-world poses, one per processed frame.
    pub trajectory: Trajectory,
    pub telemetry: Vec<FrameTelemetry>,
    pub metrics: Vec<FrameMetrics>,
}

impl RunState {
    /// World-to-camera pose of the most recent frame.
    pub fn current_pose(&self) -> Option<Pose> {
        self.trajectory.entries().last().map(|(_, p)| p.inverse())
    }
}

enum Source {
    Tum(TumSequence),
    Synthetic(SyntheticScene),
}

impl Source {
    fn open(cfg: &PipelineConfig) -> Result<Self> {
        if let Some(root) = &cfg.dataset {
            if !root.is_dir() {
                return Err(SlamError::DatasetFormat(format!("{} is not a directory", root.display())));
            }
            let intrinsics = match cfg.preset {
                Some(p) => p.intrinsics(),
                None => sequence_intrinsics(root)?,
            };
            let seq = TumSequence::open(root, intrinsics, cfg.max_assoc_gap, cfg.downsample)?;
            if seq.is_empty() {
                return Err(SlamError::DatasetFormat(format!("{} has no associated frames", root.display())));
            }
            Ok(Self::Tum(seq))
        } else {
            let mut spec = cfg.synthetic.clone().expect("validated input source");
            if let Some(seed) = cfg.seed {
                spec.seed = seed;
            }
            Ok(Self::Synthetic(generate_synthetic(&spec)?))
        }
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        match self {
            Self::Tum(s) => s.intrinsics,
            Self::Synthetic(s) => s.intrinsics,
        }
    }

    fn ground_truth(&self) -> Option<&Trajectory> {
        match self {
            Self::Tum(s) => s.ground_truth.as_ref(),
            Self::Synthetic(s) => Some(&s.trajectory),
        }
    }

    fn frames(&self, limit: Option<usize>) -> Box<dyn Iterator<Item = Result<Frame>> + '_> {
        match self {
            Self::Tum(s) => Box::new(s.stream(limit).map(|r| r.map(|(f, _)| f))),
            Self::Synthetic(s) => {
                let n = limit.map_or(s.trajectory.len(), |l| l.min(s.trajectory.len()));
                Box::new((0..n).map(|i| Ok(s.render_frame(i))))
            }
        }
    }
}

/// Calibration stored next to the sequence (as `synth` writes it), or else the
/// preset named by the directory.
fn sequence_intrinsics(root: &Path) -> Result<CameraIntrinsics> {
    let path = root.join(INTRINSICS_FILE);
    if path.is_file() {
        let body = fs::read_to_string(&path).map_err(|e| SlamError::io(&path, e))?;
        let k: CameraIntrinsics = serde_json::from_str(&body)
            .map_err(|e| SlamError::DatasetFormat(format!("{}: {e}", path.display())))?;
        k.validate()?;
        return Ok(k);
    }
    root.file_name()
        .and_then(|n| n.to_str())
        .and_then(IntrinsicsPreset::from_sequence_name)
        .map(|p| p.intrinsics())
        .ok_or_else(|| {
            SlamError::Config(format!(
                "cannot infer the camera preset from {}; pass one explicitly",
                root.display()
            ))
        })
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SlamError::io(dir, e))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| SlamError::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| SlamError::io(&probe, e))
}

fn frame_metrics(map: &GaussianMap, frame: &Frame, pose: &Pose, k: &CameraIntrinsics, index: usize, cfg: &PipelineConfig) -> Result<FrameMetrics> {
    let out = render(map, pose, k, &RenderOptions { keep_cache: false });
    let depth = out.normalized_depth(MAP_DEPTH_MIN_SILHOUETTE);
    let d = match depth_rmse(&depth, &frame.depth, &out.silhouette, cfg.tracking.visibility_threshold) {
        Ok(v) => Some(v),
        Err(SlamError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let s = if cfg.ssim { ssim(&out.rgb, &frame.rgb).ok() } else { None };
    Ok(FrameMetrics {
        frame: index,
        timestamp: frame.timestamp,
        psnr: psnr(&out.rgb, &frame.rgb)?,
        depth_rmse: d,
        ssim: s,
        ate_error: None,
    })
}

struct Outputs<'a> {
    dir: &'a Path,
    telemetry: BufWriter<File>,
}

impl<'a> Outputs<'a> {
    fn create(dir: &'a Path) -> Result<Self> {
        ensure_writable(dir)?;
        let p = dir.join(TELEMETRY_FILE);
        let f = File::create(&p).map_err(|e| SlamError::io(&p, e))?;
        Ok(Self { dir, telemetry: BufWriter::new(f) })
    }

    fn log(&mut self, t: &FrameTelemetry) -> Result<()> {
        let line = serde_json::to_string(t).expect("telemetry serializes");
        writeln!(self.telemetry, "{line}").map_err(|e| SlamError::io(self.dir.join(TELEMETRY_FILE), e))
    }

    fn keyframe(&self, map: &GaussianMap, kf: &Keyframe, k: &CameraIntrinsics) -> Result<()> {
        let dir = self.dir.join("keyframes");
        fs::create_dir_all(&dir).map_err(|e| SlamError::io(&dir, e))?;
        render(map, &kf.pose, k, &RenderOptions { keep_cache: false }).write_pngs(
            &dir,
            &format!("kf_{:05}", kf.index),
            k.depth_scale,
        )
    }

    fn checkpoint(&self, map: &GaussianMap, n_keyframes: usize) -> Result<()> {
        let dir = self.dir.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| SlamError::io(&dir, e))?;
        map.write_checkpoint(&dir.join(format!("map_kf{n_keyframes:05}.gsmap")))
    }

    fn flush(&mut self, state: &RunState) -> Result<()> {
        self.telemetry
            .flush()
            .map_err(|e| SlamError::io(self.dir.join(TELEMETRY_FILE), e))?;
        state.trajectory.write_tum(&self.dir.join(TRAJECTORY_FILE))?;
        state.map.write_checkpoint(&self.dir.join(CHECKPOINT_FILE))?;
        state.map.write_ply(&self.dir.join("map.ply"))
    }
}

/// Error returned by [`run_slam`], carrying whatever state was reached.
#[derive(Debug)]
pub struct RunFailure {
    pub error: SlamError,
    pub state: Box<RunState>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} frames)", self.error, self.state.trajectory.len())
    }
}

impl std::error::Error for RunFailure {}

impl From<SlamError> for RunFailure {
    fn from(error: SlamError) -> Self {
        Self { error, state: Box::default() }
    }
}

/// Runs tracking and mapping over the configured input and writes every
/// artifact to `cfg.out`. On tracking loss the partial trajectory and map are
/// still written before the error is returned.
pub fn run_slam(cfg: &PipelineConfig) -> std::result::Result<(RunState, Option<EvalReport>), RunFailure> {
    cfg.validate()?;
    let source = Source::open(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| SlamError::Config(format!("thread pool: {e}")))?;
    let mut outputs = Outputs::create(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml_string()).map_err(|e| SlamError::io(cfg.out.join("config.toml"), e))?;

    let k = source.intrinsics();
    let mut state = RunState::default();
    let result = pool.install(|| slam_loop(cfg, &source, &k, &mut state, &mut outputs));
    outputs.flush(&state).map_err(|e| RunFailure { error: e, state: Box::new(state.clone()) })?;
    if let Err(error) = result {
        return Err(RunFailure { error, state: Box::new(state) });
    }

    let report = match source.ground_truth() {
        Some(gt) => {
            if let Err(e) = pool.install(|| evaluate_views(cfg, &source, &k, &mut state)) {
                return Err(RunFailure { error: e, state: Box::new(state) });
            }
            let ate_result = match ate(&state.trajectory, gt) {
                Ok(a) => Some(a),
                Err(SlamError::InsufficientOverlap { matched, .. }) => {
                    log::warn!("ATE skipped: only {matched} poses matched the ground truth");
                    None
                }
                Err(e) => return Err(RunFailure { error: e, state: Box::new(state) }),
            };
            let report = EvalReport::from_frames(state.metrics.clone(), ate_result.as_ref());
            let written = report
                .write(&cfg.out)
                .and_then(|_| plot_trajectories(&state.trajectory, Some(gt), &cfg.out.join("trajectory.png")));
            if let Err(e) = written {
                return Err(RunFailure { error: e, state: Box::new(state) });
            }
            Some(report)
        }
        None => None,
    };
    Ok((state, report))
}

fn slam_loop(
    cfg: &PipelineConfig,
    source: &Source,
    k: &CameraIntrinsics,
    state: &mut RunState,
    outputs: &mut Outputs,
) -> Result<()> {
    for (index, frame) in source.frames(cfg.max_frames).enumerate() {
        let frame = frame?;
        frame.check_intrinsics(k)?;
        let track_start = Instant::now();
        let (pose, loss) = match state.current_pose() {
            None => (Pose::identity(), None),
            Some(prev) => {
                let r = track_frame(&state.map, &frame, &prev, k, &cfg.tracking)?;
                (r.pose, Some(r.final_loss))
            }
        };
        let track_ms = track_start.elapsed().as_secs_f64() * 1e3;

        let map_start = Instant::now();
        let is_keyframe = index == 0 || select_keyframe(state.keyframes.last(), &frame, &pose, k, &cfg.mapping);
        let mut map_loss = None;
        if is_keyframe {
            let first = index == 0;
            if first {
                state.map = GaussianMap::initialize_from_frame(&frame, k)?;
            }
            state.keyframes.push(Keyframe { frame: frame.clone(), pose, index });
            let (added, l, removed) = map_keyframe(&mut state.map, &state.keyframes, k, &cfg.mapping, !first)?;
            log::debug!("frame {index}: keyframe, +{added} -{removed} primitives, loss {l:.5}");
            map_loss = Some(l);
            if cfg.keyframe_renders {
                outputs.keyframe(&state.map, state.keyframes.last().unwrap(), k)?;
            }
            let n = state.keyframes.len();
            if cfg.checkpoint_every > 0 && n % cfg.checkpoint_every == 0 {
                outputs.checkpoint(&state.map, n)?;
            }
        }
        let map_ms = map_start.elapsed().as_secs_f64() * 1e3;

        state.trajectory.push(frame.timestamp, pose.inverse())?;
        let t = FrameTelemetry {
            frame: index,
            track_ms,
            map_ms,
            loss: loss.or(map_loss).unwrap_or(0.0),
            n_gaussians: state.map.len(),
            keyframe: is_keyframe,
        };
        log::info!(
            "frame {index}: track {track_ms:.0} ms, map {map_ms:.0} ms, loss {:.5}, {} gaussians",
            t.loss,
            t.n_gaussians,
        );
        outputs.log(&t)?;
        state.telemetry.push(t);
    }
    Ok(())
}

/// Scores every processed frame against the final map at its estimated pose.
fn evaluate_views(cfg: &PipelineConfig, source: &Source, k: &CameraIntrinsics, state: &mut RunState) -> Result<()> {
    state.metrics.clear();
    let poses: Vec<Pose> = state.trajectory.entries().iter().map(|(_, p)| p.inverse()).collect();
    for (index, frame) in source.frames(Some(poses.len())).enumerate() {
        let m = frame_metrics(&state.map, &frame?, &poses[index], k, index, cfg)?;
        state.metrics.push(m);
    }
    Ok(())
}

/// Process exit status for a failed run.
pub fn exit_code(e: &SlamError) -> i32 {
    match e {
        SlamError::DatasetFormat(_) | SlamError::Io { .. } | SlamError::Image { .. } => 2,
        SlamError::TrackingLost { .. } => 3,
        SlamError::Config(_) | SlamError::InvalidIntrinsics(_) => 4,
        _ => 1,
    }
}

/// Renders RGB, depth and silhouette PNGs of a checkpointed map for each
/// world-to-camera pose. Returns the number of views written.
pub fn render_views(checkpoint: &Path, poses: &[Pose], k: &CameraIntrinsics, out: &Path) -> Result<usize> {
    let map = GaussianMap::read_checkpoint(checkpoint)?;
    if poses.is_empty() {
        return Ok(0);
    }
    fs::create_dir_all(out).map_err(|e| SlamError::io(out, e))?;
    for (i, pose) in poses.iter().enumerate() {
        render(&map, pose, k, &RenderOptions { keep_cache: false }).write_pngs(out, &format!("view_{i:05}"), k.depth_scale)?;
    }
    Ok(poses.len())
}

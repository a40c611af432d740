//! RGB-D observations, trajectories, TUM RGB-D ingestion, and the seeded
//! synthetic scene generator used as a ground-truth oracle.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::gaussian_map::{GaussianMap, GaussianPrimitive};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::raster::{downsample_depth, downsample_rgb, RgbImage, ScalarImage};
use crate::splat_render::{render, RenderOptions};

/// Timestamped color + metric depth observation. Depth 0 marks invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: ScalarImage,
}

impl Frame {
    pub fn new(timestamp: f64, rgb: RgbImage, depth: ScalarImage) -> Result<Self> {
        rgb.same_shape(&depth)?;
        if depth.data.iter().any(|d| !(*d >= 0.0)) {
            return Err(SlamError::DatasetFormat("negative or NaN depth".into()));
        }
        Ok(Self {
            timestamp,
            rgb,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn check_intrinsics(&self, k: &CameraIntrinsics) -> Result<()> {
        if self.width() != k.width || self.height() != k.height {
            return Err(SlamError::DimensionMismatch(
                self.width(),
                self.height(),
                k.width,
                k.height,
            ));
        }
        Ok(())
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// Same observation with rows and columns swapped.
    pub fn transposed(&self) -> Self {
        Self {
            timestamp: self.timestamp,
            rgb: self.rgb.transposed(),
            depth: self.depth.transposed(),
        }
    }
}

/// Timestamped camera-to-world poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a pose; timestamps must be strictly increasing.
    pub fn push(&mut self, timestamp: f64, camera_to_world: Pose) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if !(timestamp > last) {
                return Err(SlamError::DatasetFormat(format!(
                    "trajectory timestamps must increase ({timestamp} after {last})"
                )));
            }
        }
        self.entries.push((timestamp, camera_to_world));
        Ok(())
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prefix(&self, n: usize) -> Self {
        Self {
            entries: self.entries[..n.min(self.len())].to_vec(),
        }
    }

    /// Pose at `t`, blending the bracketing samples; `None` outside the covered span.
    pub fn interpolate(&self, t: f64) -> Option<Pose> {
        let i = self.entries.partition_point(|(ts, _)| *ts < t);
        if i < self.entries.len() && self.entries[i].0 == t {
            return Some(self.entries[i].1);
        }
        if i == 0 || i == self.entries.len() {
            return None;
        }
        let (t0, p0) = self.entries[i - 1];
        let (t1, p1) = self.entries[i];
        Some(p0.interpolate(&p1, (t - t0) / (t1 - t0)))
    }

    /// TUM text format: `timestamp tx ty tz qx qy qz qw`.
    pub fn write_tum(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SlamError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| SlamError::io(path, e);
        writeln!(w, "# timestamp tx ty tz qx qy qz qw").map_err(io)?;
        for (t, p) in &self.entries {
            let q = p.rotation.quaternion();
            writeln!(
                w,
                "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                t, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_tum(path: &Path) -> Result<Self> {
        let mut traj = Self::new();
        for (line_no, fields) in read_index(path)? {
            if fields.len() < 8 {
                return Err(SlamError::DatasetFormat(format!(
                    "{}:{line_no}: expected 8 fields",
                    path.display()
                )));
            }
            let nums = fields[..8]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| {
                    SlamError::DatasetFormat(format!("{}:{line_no}: {e}", path.display()))
                })?;
            let pose = Pose::from_parts([nums[1], nums[2], nums[3]], [nums[4], nums[5], nums[6], nums[7]]);
            traj.push(nums[0], pose)?;
        }
        Ok(traj)
    }
}

/// Non-comment lines of a TUM index file, split on whitespace.
fn read_index(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let file = File::open(path)
        .map_err(|e| SlamError::DatasetFormat(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| SlamError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push((i + 1, line.split_whitespace().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn read_stamped_files(path: &Path) -> Result<Vec<(f64, String)>> {
    read_index(path)?
        .into_iter()
        .map(|(line_no, f)| {
            if f.len() < 2 {
                return Err(SlamError::DatasetFormat(format!(
                    "{}:{line_no}: expected `timestamp filename`",
                    path.display()
                )));
            }
            let t = f[0].parse::<f64>().map_err(|e| {
                SlamError::DatasetFormat(format!("{}:{line_no}: {e}", path.display()))
            })?;
            Ok((t, f[1].clone()))
        })
        .collect()
}

/// Greedy nearest-neighbour association: candidate pairs within `max_gap` are
/// taken in order of increasing time difference, each stamp used at most once.
/// Returns `(index_a, index_b)` pairs sorted by `index_a`.
pub fn associate(a: &[f64], b: &[f64], max_gap: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        // b is not assumed sorted; index files are, but stay general.
        for (j, &tb) in b.iter().enumerate() {
            let gap = (ta - tb).abs();
            if gap < max_gap {
                candidates.push((gap, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort();
    pairs
}

/// Published pinhole calibrations of the three TUM RGB-D Kinects (640x480).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntrinsicsPreset {
    Fr1,
    Fr2,
    Fr3,
}

impl IntrinsicsPreset {
    pub fn intrinsics(self) -> CameraIntrinsics {
        let (fx, fy, cx, cy) = match self {
            Self::Fr1 => (517.3, 516.5, 318.6, 255.3),
            Self::Fr2 => (520.9, 521.0, 325.1, 249.7),
            Self::Fr3 => (535.4, 539.2, 320.1, 247.6),
        };
        CameraIntrinsics::new(fx, fy, cx, cy, 640, 480).expect("preset intrinsics are valid")
    }

    /// Picks the calibration from a sequence directory name such as
    /// `rgbd_dataset_freiburg1_desk`.
    pub fn from_sequence_name(name: &str) -> Option<Self> {
        let lower = name.to_ascii_lowercase();
        if lower.contains("freiburg1") || lower.contains("fr1") {
            Some(Self::Fr1)
        } else if lower.contains("freiburg2") || lower.contains("fr2") {
            Some(Self::Fr2)
        } else if lower.contains("freiburg3") || lower.contains("fr3") {
            Some(Self::Fr3)
        } else {
            None
        }
    }
}

impl std::str::FromStr for IntrinsicsPreset {
    type Err = SlamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fr1" => Ok(Self::Fr1),
            "fr2" => Ok(Self::Fr2),
            "fr3" => Ok(Self::Fr3),
            other => Err(SlamError::Config(format!("unknown intrinsics preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
struct FrameEntry {
    timestamp: f64,
    rgb: PathBuf,
    depth: PathBuf,
    ground_truth: Option<Pose>,
}

/// An associated TUM RGB-D sequence. Frames are decoded lazily.
#[derive(Clone, Debug)]
pub struct TumSequence {
    pub root: PathBuf,
    /// Intrinsics of the decoded (possibly downsampled) frames.
    pub intrinsics: CameraIntrinsics,
    pub downsample: usize,
    pub ground_truth: Option<Trajectory>,
    /// RGB frames dropped for lack of a depth partner.
    pub unpaired_rgb: usize,
    entries: Vec<FrameEntry>,
}

impl TumSequence {
    /// Reads and associates the index files under `root`.
    pub fn open(
        root: &Path,
        full_res: CameraIntrinsics,
        max_assoc_gap: f64,
        downsample: usize,
    ) -> Result<Self> {
        if !root.is_dir() {
            return Err(SlamError::DatasetFormat(format!(
                "dataset directory {} does not exist",
                root.display()
            )));
        }
        let rgb = read_stamped_files(&root.join("rgb.txt"))?;
        let depth = read_stamped_files(&root.join("depth.txt"))?;
        let gt_path = root.join("groundtruth.txt");
        let ground_truth = if gt_path.exists() {
            Some(Trajectory::read_tum(&gt_path)?)
        } else {
            None
        };

        let rgb_t: Vec<f64> = rgb.iter().map(|e| e.0).collect();
        let depth_t: Vec<f64> = depth.iter().map(|e| e.0).collect();
        let pairs = associate(&rgb_t, &depth_t, max_assoc_gap);
        let unpaired_rgb = rgb.len() - pairs.len();
        if unpaired_rgb > 0 {
            log::info!("{unpaired_rgb} rgb frames had no depth partner and were skipped");
        }
        let entries = pairs
            .into_iter()
            .map(|(i, j)| FrameEntry {
                timestamp: rgb[i].0,
                rgb: root.join(&rgb[i].1),
                depth: root.join(&depth[j].1),
                ground_truth: ground_truth.as_ref().and_then(|g| g.interpolate(rgb[i].0)),
            })
            .collect();

        Ok(Self {
            root: root.to_path_buf(),
            intrinsics: full_res.downsampled(downsample)?,
            downsample: downsample.max(1),
            ground_truth,
            unpaired_rgb,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }

    /// Ground-truth camera-to-world pose interpolated to frame `i`.
    pub fn ground_truth_at(&self, i: usize) -> Option<Pose> {
        self.entries[i].ground_truth
    }

    pub fn load_frame(&self, i: usize) -> Result<Frame> {
        let e = &self.entries[i];
        let rgb = RgbImage::read_png(&e.rgb)?;
        let depth = ScalarImage::read_depth_png(&e.depth, self.intrinsics.depth_scale)?;
        let frame = Frame::new(
            e.timestamp,
            downsample_rgb(&rgb, self.downsample),
            downsample_depth(&depth, self.downsample),
        )?;
        frame.check_intrinsics(&self.intrinsics)?;
        Ok(frame)
    }

    /// Streams `(frame, ground truth)` in sequence order, decoding up to two
    /// frames ahead on a background thread.
    pub fn stream(&self, limit: Option<usize>) -> FrameStream {
        let n = limit.map_or(self.len(), |l| l.min(self.len()));
        let (tx, rx) = mpsc::sync_channel(2);
        let seq = self.clone();
        thread::spawn(move || {
            for i in 0..n {
                let item = seq.load_frame(i).map(|f| (f, seq.ground_truth_at(i)));
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        FrameStream { rx }
    }
}

pub struct FrameStream {
    rx: mpsc::Receiver<Result<(Frame, Option<Pose>)>>,
}

impl Iterator for FrameStream {
    type Item = Result<(Frame, Option<Pose>)>;
    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

/// Camera path of a synthetic sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionProfile {
    /// Camera never moves.
    Static,
    /// Circles the scene center (2 m ahead of the start pose) about the vertical
    /// axis while looking at it, sweeping `total_angle_deg` over the sequence.
    Orbit { total_angle_deg: f64 },
    /// Moves straight along the optical axis by `distance` meters.
    Dolly { distance: f64 },
    /// Pans back and forth by up to `amplitude_deg` with a small sideways drift.
    RotationHeavy { amplitude_deg: f64 },
}

const SCENE_CENTER_DEPTH: f64 = 2.0;

impl MotionProfile {
    /// Camera-to-world pose at fraction `s` in [0, 1] of the sequence.
    pub fn camera_to_world(&self, s: f64) -> Pose {
        match *self {
            Self::Static => Pose::identity(),
            Self::Orbit { total_angle_deg } => {
                let theta = total_angle_deg.to_radians() * s;
                let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), theta);
                let center = Vector3::new(0.0, 0.0, SCENE_CENTER_DEPTH);
                let position = center + rot.transform_vector(&Vector3::new(0.0, 0.0, -SCENE_CENTER_DEPTH));
                Pose::new(rot, position)
            }
            Self::Dolly { distance } => Pose::new(
                UnitQuaternion::identity(),
                Vector3::new(0.0, 0.0, distance * s),
            ),
            Self::RotationHeavy { amplitude_deg } => {
                let phase = s * std::f64::consts::TAU;
                let yaw = amplitude_deg.to_radians() * phase.sin();
                let pitch = 0.3 * amplitude_deg.to_radians() * (2.0 * phase).sin();
                Pose::new(
                    UnitQuaternion::from_euler_angles(pitch, yaw, 0.0),
                    Vector3::new(0.05 * s, 0.0, 0.0),
                )
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_primitives: usize,
    pub n_frames: usize,
    pub profile: MotionProfile,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Frame rate used for timestamps.
    pub fps: f64,
    /// Range of primitive radii in meters.
    pub radius_range: (f64, f64),
    pub opacity_range: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_primitives: 500,
            n_frames: 60,
            profile: MotionProfile::Orbit {
                total_angle_deg: 20.0,
            },
            width: 64,
            height: 64,
            focal: 64.0,
            fps: 30.0,
            radius_range: (0.08, 0.2),
            opacity_range: (0.6, 1.0),
        }
    }
}

impl SyntheticSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Calibration file written alongside exported sequences.
pub const INTRINSICS_FILE: &str = "intrinsics.json";

/// Synthetic depth is valid where the rendered silhouette exceeds this.
pub const SYNTHETIC_DEPTH_MIN_SILHOUETTE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub primitives: GaussianMap,
    /// Ground-truth camera-to-world poses.
    pub trajectory: Trajectory,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl SyntheticScene {
    /// Renders frame `i` from the ground-truth map.
    pub fn render_frame(&self, i: usize) -> Frame {
        let (t, cam_to_world) = self.trajectory.entries()[i];
        render(
            &self.primitives,
            &cam_to_world.inverse(),
            &self.intrinsics,
            &RenderOptions { keep_cache: false },
        )
        .to_frame(t, SYNTHETIC_DEPTH_MIN_SILHOUETTE)
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.trajectory.len()).map(|i| self.render_frame(i))
    }

    /// Writes the sequence in TUM layout (rgb/, depth/, rgb.txt, depth.txt,
    /// groundtruth.txt).
    pub fn export_tum(&self, root: &Path) -> Result<()> {
        let rgb_dir = root.join("rgb");
        let depth_dir = root.join("depth");
        for d in [&rgb_dir, &depth_dir] {
            fs::create_dir_all(d).map_err(|e| SlamError::io(d, e))?;
        }
        let mut rgb_index = String::from("# color images\n# timestamp filename\n");
        let mut depth_index = String::from("# depth maps\n# timestamp filename\n");
        for (i, frame) in self.frames().enumerate() {
            let name = format!("{:.6}.png", frame.timestamp);
            frame.rgb.write_png(&rgb_dir.join(&name))?;
            frame
                .depth
                .write_depth_png(&depth_dir.join(&name), self.intrinsics.depth_scale)?;
            rgb_index.push_str(&format!("{:.6} rgb/{name}\n", frame.timestamp));
            depth_index.push_str(&format!("{:.6} depth/{name}\n", frame.timestamp));
            log::debug!("exported synthetic frame {i}");
        }
        let write = |name: &str, body: &str| {
            let p = root.join(name);
            fs::write(&p, body).map_err(|e| SlamError::io(p, e))
        };
        write("rgb.txt", &rgb_index)?;
        write("depth.txt", &depth_index)?;
        self.trajectory.write_tum(&root.join("groundtruth.txt"))?;
        let k = serde_json::to_string_pretty(&self.intrinsics).expect("intrinsics serialize");
        write(INTRINSICS_FILE, &k)
    }
}

/// Seeded random scene: primitives in a 2 x 2 x 2 m box 1-3 m in front of the
/// start pose, and a camera path following `spec.profile`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticScene> {
    if spec.n_primitives < 1 || spec.n_frames < 2 {
        return Err(SlamError::Config(
            "synthetic scenes need at least 1 primitive and 2 frames".into(),
        ));
    }
    let intrinsics = spec.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut primitives = GaussianMap::new();
    for _ in 0..spec.n_primitives {
        let g = GaussianPrimitive {
            center: Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..3.0),
            ),
            radius: rng.random_range(spec.radius_range.0..=spec.radius_range.1),
            opacity: rng.random_range(spec.opacity_range.0..=spec.opacity_range.1),
            color: [rng.random(), rng.random(), rng.random()],
        };
        primitives.push(g, 0);
    }
    let mut trajectory = Trajectory::new();
    let last = (spec.n_frames - 1) as f64;
    for i in 0..spec.n_frames {
        trajectory.push(i as f64 / spec.fps, spec.profile.camera_to_world(i as f64 / last))?;
    }
    Ok(SyntheticScene {
        primitives,
        trajectory,
        intrinsics,
        seed: spec.seed,
    })
}

//! Explicit scene representation: an ordered, growable store of isotropic 3D
//! Gaussians, plus the policies that create and cull them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Result, SlamError};
use crate::geometry::{unproject, CameraIntrinsics, PixelPoint, Pose};
use crate::splat_render::RenderOutput;

/// Smallest radius the optimizer may leave behind; keeps `radius > 0`.
pub const RADIUS_FLOOR: f64 = 1e-9;

const CHECKPOINT_MAGIC: &[u8; 8] = b"GSMAP01\0";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrimitive {
    /// World-frame center in meters.
    pub center: Vector3<f64>,
    /// Isotropic standard deviation in meters.
    pub radius: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianPrimitive {
    /// Clamps opacity and color into [0, 1] and radius away from zero.
    pub fn clamp(&mut self) {
        self.opacity = self.opacity.clamp(0.0, 1.0);
        for c in &mut self.color {
            *c = c.clamp(0.0, 1.0);
        }
        self.radius = self.radius.max(RADIUS_FLOOR);
    }

    pub fn is_valid(&self) -> bool {
        self.center.iter().all(|x| x.is_finite())
            && self.radius.is_finite()
            && self.radius > 0.0
            && (0.0..=1.0).contains(&self.opacity)
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }

    /// New primitive for a pixel observed at metric `depth` from a camera with
    /// world-to-camera `pose`: centered on the back-projected point, opacity 0.5,
    /// and a radius that projects to one pixel.
    pub fn from_pixel(
        u: usize,
        v: usize,
        depth: f64,
        color: [f64; 3],
        pose: &Pose,
        k: &CameraIntrinsics,
    ) -> Result<Self> {
        let xc = unproject(&PixelPoint::new(u as f64, v as f64), depth, k)?;
        let center = pose.inverse().transform_point(&xc);
        let mut g = Self {
            center,
            radius: depth / k.fx,
            opacity: 0.5,
            color,
        };
        g.clamp();
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Pixels whose silhouette falls below this are unexplained.
    pub silhouette_threshold: f64,
    /// Relative depth error that triggers a new primitive.
    pub depth_error_ratio: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            silhouette_threshold: 0.5,
            depth_error_ratio: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub min_opacity: f64,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            min_opacity: 0.005,
            min_radius: 1e-6,
            max_radius: 1.0,
        }
    }
}

impl PruneConfig {
    pub fn keeps(&self, g: &GaussianPrimitive) -> bool {
        g.opacity >= self.min_opacity && g.radius >= self.min_radius && g.radius <= self.max_radius
    }
}

/// Ordered primitives with the frame index each was inserted at.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianMap {
    primitives: Vec<GaussianPrimitive>,
    epochs: Vec<u32>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_primitives(primitives: Vec<GaussianPrimitive>) -> Self {
        let epochs = vec![0; primitives.len()];
        Self { primitives, epochs }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    /// Mutable access for optimizers; callers must re-clamp afterwards.
    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }

    pub fn epochs(&self) -> &[u32] {
        &self.epochs
    }

    pub fn push(&mut self, mut g: GaussianPrimitive, epoch: u32) {
        g.clamp();
        self.primitives.push(g);
        self.epochs.push(epoch);
    }

    pub fn clamp_all(&mut self) {
        self.primitives.iter_mut().for_each(GaussianPrimitive::clamp);
    }

    /// One primitive per valid-depth pixel of the first frame, at the identity pose.
    pub fn initialize_from_frame(frame: &Frame, k: &CameraIntrinsics) -> Result<Self> {
        let mut map = Self::new();
        let pose = Pose::identity();
        for v in 0..frame.height() {
            for u in 0..frame.width() {
                let d = *frame.depth.get(u, v);
                if d > 0.0 {
                    let g = GaussianPrimitive::from_pixel(u, v, d, *frame.rgb.get(u, v), &pose, k)?;
                    map.push(g, 0);
                }
            }
        }
        if map.is_empty() {
            return Err(SlamError::EmptyInitialization);
        }
        Ok(map)
    }

    /// Adds a primitive for every valid-depth pixel the current render fails to
    /// explain: silhouette below the threshold, or normalized depth off by more
    /// than the configured fraction of the observed depth.
    pub fn densify(
        &mut self,
        frame: &Frame,
        pose: &Pose,
        render: &RenderOutput,
        k: &CameraIntrinsics,
        cfg: &DensifyConfig,
        epoch: u32,
    ) -> Result<usize> {
        frame.rgb.same_shape(&render.silhouette)?;
        let mut added = 0;
        for v in 0..frame.height() {
            for u in 0..frame.width() {
                let z = *frame.depth.get(u, v);
                if z <= 0.0 {
                    continue;
                }
                let s = *render.silhouette.get(u, v);
                let unexplained = if s < cfg.silhouette_threshold {
                    true
                } else {
                    let d = *render.depth.get(u, v) / s;
                    (d - z).abs() > cfg.depth_error_ratio * z
                };
                if unexplained {
                    let g = GaussianPrimitive::from_pixel(u, v, z, *frame.rgb.get(u, v), pose, k)?;
                    self.push(g, epoch);
                    added += 1;
                }
            }
        }
        Ok(added)
    }

    /// Drops faded or degenerate primitives. Survivors keep their relative order.
    pub fn prune(&mut self, cfg: &PruneConfig) -> usize {
        let before = self.len();
        let keep: Vec<bool> = self.primitives.iter().map(|g| cfg.keeps(g)).collect();
        let mut it = keep.iter();
        self.primitives.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.epochs.retain(|_| *it.next().unwrap());
        before - self.len()
    }

    /// Little-endian checkpoint: magic, u64 count, then per primitive eight f32
    /// values `[cx, cy, cz, radius, opacity, r, g, b]`.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SlamError::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_checkpoint_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| SlamError::io(path, e))
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for g in &self.primitives {
            let vals = [
                g.center.x, g.center.y, g.center.z, g.radius, g.opacity, g.color[0], g.color[1],
                g.color[2],
            ];
            for x in vals {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SlamError::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| SlamError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| SlamError::CheckpointFormat(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing GSMAP01 magic"));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body = &bytes[16..];
        if count.checked_mul(32) != Some(body.len() as u64) {
            return Err(bad("primitive count does not match payload size"));
        }
        let mut map = Self::new();
        for chunk in body.chunks_exact(32) {
            let f = |i: usize| f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            let g = GaussianPrimitive {
                center: Vector3::new(f(0), f(1), f(2)),
                radius: f(3),
                opacity: f(4),
                color: [f(5), f(6), f(7)],
            };
            if !g.is_valid() {
                return Err(bad("primitive violates parameter bounds"));
            }
            map.push(g, 0);
        }
        Ok(map)
    }

    /// ASCII PLY point cloud (`x y z red green blue`).
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SlamError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| SlamError::io(path, e);
        write!(
            w,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\n\
             property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
             end_header\n",
            self.len()
        )
        .map_err(io)?;
        for g in &self.primitives {
            let c = g.color.map(|x| (x * 255.0).round() as u8);
            writeln!(
                w,
                "{} {} {} {} {} {}",
                g.center.x as f32, g.center.y as f32, g.center.z as f32, c[0], c[1], c[2]
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Image;
    use crate::splat_render::{render, RenderOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k600(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
            .unwrap()
    }

    fn flat_frame(w: usize, h: usize, depth: f64) -> Frame {
        Frame::new(
            0.0,
            Image::filled(w, h, [0.2, 0.4, 0.6]),
            Image::filled(w, h, depth),
        )
        .unwrap()
    }

    fn prim(opacity: f64, radius: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            center: Vector3::new(0.0, 0.0, 2.0),
            radius,
            opacity,
            color: [0.5; 3],
        }
    }

    #[test]
    fn initialization_rule() {
        let k = CameraIntrinsics::new(600.0, 600.0, 1.0, 1.0, 3, 3).unwrap();
        let mut depth = Image::filled(3, 3, 0.0);
        *depth.get_mut(1, 1) = 2.0;
        let frame = Frame::new(0.0, Image::filled(3, 3, [1.0, 0.0, 0.0]), depth).unwrap();
        let map = GaussianMap::initialize_from_frame(&frame, &k).unwrap();
        assert_eq!(map.len(), 1);
        let g = map.primitives()[0];
        assert_eq!(g.center, Vector3::new(0.0, 0.0, 2.0));
        assert!((g.radius - 2.0 / 600.0).abs() < 1e-15);
        assert_eq!(g.opacity, 0.5);
        assert_eq!(g.color, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn initialization_counts_and_errors() {
        let k = k600(10, 10);
        let map = GaussianMap::initialize_from_frame(&flat_frame(10, 10, 1.5), &k).unwrap();
        assert_eq!(map.len(), 100);
        assert!(matches!(
            GaussianMap::initialize_from_frame(&flat_frame(10, 10, 0.0), &k),
            Err(SlamError::EmptyInitialization)
        ));
    }

    #[test]
    fn prune_cases() {
        let cfg = PruneConfig::default();
        let mut keep_all = GaussianMap::from_primitives(vec![prim(0.5, 0.01), prim(0.005, 1.0)]);
        assert_eq!(keep_all.prune(&cfg), 0);

        let mut single = GaussianMap::from_primitives(vec![prim(0.0, 0.01)]);
        assert_eq!(single.prune(&cfg), 1);
        assert!(single.is_empty());

        let ops = [0.9, 0.001, 0.3, 0.004, 0.6];
        let mut mixed = GaussianMap::new();
        for (i, o) in ops.iter().enumerate() {
            mixed.push(prim(*o, 0.01 * (i + 1) as f64), i as u32);
        }
        let expected: Vec<_> = mixed
            .primitives()
            .iter()
            .copied()
            .filter(|g| g.opacity >= 0.005)
            .collect();
        assert_eq!(mixed.prune(&cfg), 2);
        assert_eq!(mixed.primitives(), &expected[..]);
        assert_eq!(mixed.epochs(), &[0, 2, 4]);

        let mut radii = GaussianMap::from_primitives(vec![prim(0.5, 1e-7), prim(0.5, 1.5)]);
        assert_eq!(radii.prune(&cfg), 2);
    }

    #[test]
    fn densify_on_empty_map_adds_every_valid_pixel() {
        let k = k600(8, 6);
        let mut frame = flat_frame(8, 6, 2.0);
        *frame.depth.get_mut(3, 3) = 0.0;
        *frame.depth.get_mut(0, 0) = 0.0;
        let mut map = GaussianMap::new();
        let r = render(&map, &Pose::identity(), &k, &RenderOptions::default());
        let added = map
            .densify(&frame, &Pose::identity(), &r, &k, &DensifyConfig::default(), 1)
            .unwrap();
        assert_eq!(added, 46);
        assert!(map.epochs().iter().all(|&e| e == 1));
    }

    #[test]
    fn densify_skips_fully_explained_pixels() {
        let k = k600(4, 4);
        let frame = flat_frame(4, 4, 2.0);
        let mut map = GaussianMap::new();
        // One huge opaque primitive at the observed depth covers the whole image.
        map.push(
            GaussianPrimitive {
                center: Vector3::new(0.0, 0.0, 2.0),
                radius: 1.0,
                opacity: 1.0,
                color: [0.2, 0.4, 0.6],
            },
            0,
        );
        let r = render(&map, &Pose::identity(), &k, &RenderOptions::default());
        assert!(r.silhouette.data.iter().all(|&s| s > 0.99));
        let added = map
            .densify(&frame, &Pose::identity(), &r, &k, &DensifyConfig::default(), 1)
            .unwrap();
        assert_eq!(added, 0);
    }

    #[test]
    fn densify_is_nearly_idempotent_on_a_plane() {
        let k = CameraIntrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap();
        let frame = flat_frame(32, 24, 1.7);
        let mut map = GaussianMap::new();
        let cfg = DensifyConfig::default();
        let opts = RenderOptions::default();
        let r0 = render(&map, &Pose::identity(), &k, &opts);
        let first = map.densify(&frame, &Pose::identity(), &r0, &k, &cfg, 0).unwrap();
        let r1 = render(&map, &Pose::identity(), &k, &opts);
        let second = map.densify(&frame, &Pose::identity(), &r1, &k, &cfg, 1).unwrap();
        assert_eq!(first, 32 * 24);
        assert!(second * 100 <= first, "second pass added {second}");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut map = GaussianMap::new();
        for _ in 0..17 {
            map.push(
                GaussianPrimitive {
                    center: Vector3::new(rng.random(), rng.random(), rng.random()),
                    radius: rng.random_range(0.01..0.2),
                    opacity: rng.random(),
                    color: [rng.random(), rng.random(), rng.random()],
                },
                0,
            );
        }
        let bytes = map.to_checkpoint_bytes();
        assert_eq!(&bytes[..8], b"GSMAP01\0");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 17);
        assert_eq!(bytes.len(), 16 + 17 * 32);
        let back = GaussianMap::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        for (a, b) in map.primitives().iter().zip(back.primitives()) {
            assert!((a.center - b.center).norm() < 1e-6);
            assert!((a.opacity - b.opacity).abs() < 1e-7);
        }

        assert!(GaussianMap::from_checkpoint_bytes(b"GSMAP02\0").is_err());
        assert!(matches!(
            GaussianMap::from_checkpoint_bytes(&bytes[..bytes.len() - 4]),
            Err(SlamError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn ply_export_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ply");
        GaussianMap::from_primitives(vec![prim(0.5, 0.1), prim(0.7, 0.2)])
            .write_ply(&path)
            .unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 2\n"));
        assert_eq!(text.lines().filter(|l| l.ends_with("128 128 128")).count(), 2);
    }

    #[derive(Clone, Debug)]
    enum Op {
        Densify(f64),
        Prune,
        Perturb(u64),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0.5f64..3.0).prop_map(Op::Densify),
            Just(Op::Prune),
            any::<u64>().prop_map(Op::Perturb),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn invariants_hold_under_random_ops(ops in prop::collection::vec(arb_op(), 1..8)) {
            let k = CameraIntrinsics::new(12.0, 12.0, 5.5, 3.5, 12, 8).unwrap();
            let mut map = GaussianMap::new();
            for (i, op) in ops.iter().enumerate() {
                match op {
                    Op::Densify(z) => {
                        let frame = flat_frame(12, 8, *z);
                        let pose = Pose::identity().translate(&Vector3::new(0.05 * i as f64, 0.0, 0.0));
                        let r = render(&map, &pose, &k, &RenderOptions::default());
                        map.densify(&frame, &pose, &r, &k, &DensifyConfig::default(), i as u32).unwrap();
                    }
                    Op::Prune => {
                        let cfg = PruneConfig::default();
                        let survivors: Vec<_> = map.primitives().iter().copied().filter(|g| cfg.keeps(g)).collect();
                        map.prune(&cfg);
                        prop_assert_eq!(map.primitives(), &survivors[..]);
                    }
                    Op::Perturb(seed) => {
                        // Stand-in for an unconstrained optimizer step.
                        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                        for g in map.primitives_mut() {
                            g.opacity += rng.random_range(-0.6..0.6);
                            g.radius += rng.random_range(-0.05..0.05);
                            for c in &mut g.color {
                                *c += rng.random_range(-0.6..0.6);
                            }
                        }
                        map.clamp_all();
                    }
                }
                prop_assert!(map.primitives().iter().all(GaussianPrimitive::is_valid));
                prop_assert_eq!(map.primitives().len(), map.epochs().len());
            }
        }
    }
}

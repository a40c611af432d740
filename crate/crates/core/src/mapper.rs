//! Keyframe selection by reprojection parallax, and fixed-pose refinement of the
//! Gaussian parameters over a window of keyframes.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Result, SlamError};
use crate::gaussian_map::{DensifyConfig, GaussianMap, PruneConfig};
use crate::geometry::{project_mono, unproject, CameraIntrinsics, PixelPoint, Pose};
use crate::splat_render::{render, render_backward, RenderOptions};
use crate::tracker::{masked_l1_loss, LossEvaluation};

/// The mapping depth term needs `S` above this to form `D / S`.
pub const MAP_DEPTH_MIN_SILHOUETTE: f64 = 1e-2;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub frame: Frame,
    /// World-to-camera pose, fixed during mapping.
    pub pose: Pose,
    /// Position in the input sequence.
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    /// Mean reprojection displacement (pixels) that promotes a frame to keyframe.
    pub parallax_threshold: f64,
    /// Sampling stride of the parallax grid in pixels.
    pub grid_stride: usize,
    pub map_iters: usize,
    pub lr_center: f64,
    pub lr_radius: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub window_size: usize,
    pub lambda_color: f64,
    pub lambda_depth: f64,
    /// Restore the best parameters and halve the rates when a pass over the
    /// window raises the loss.
    pub backtracking: bool,
    pub densify: DensifyConfig,
    pub prune: PruneConfig,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            parallax_threshold: 15.0,
            grid_stride: 8,
            map_iters: 60,
            lr_center: 1e-4,
            lr_radius: 5e-4,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            window_size: 8,
            lambda_color: 0.5,
            lambda_depth: 1.0,
            backtracking: true,
            densify: DensifyConfig::default(),
            prune: PruneConfig::default(),
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SlamError::Config(format!("mapping: {m}")));
        if !(self.parallax_threshold > 0.0) {
            return bad("parallax threshold must be positive");
        }
        if self.map_iters == 0 || self.window_size == 0 || self.grid_stride == 0 {
            return bad("map_iters, window_size and grid_stride must be at least 1");
        }
        let lrs = [self.lr_center, self.lr_radius, self.lr_opacity, self.lr_color];
        if lrs.iter().any(|lr| !(*lr >= 0.0)) {
            return bad("learning rates must be non-negative");
        }
        if self.lambda_color < 0.0 || self.lambda_depth < 0.0 || self.lambda_color + self.lambda_depth == 0.0 {
            return bad("loss weights must be non-negative and not both zero");
        }
        Ok(())
    }
}

/// Mean pixel displacement of a regular grid of keyframe pixels reprojected
/// into the current view using the keyframe depth.
pub fn average_parallax(
    kf: &Keyframe,
    current: &Frame,
    current_pose: &Pose,
    k: &CameraIntrinsics,
    stride: usize,
) -> Result<f64> {
    current.check_intrinsics(k)?;
    let stride = stride.max(1);
    let kf_to_current = current_pose.compose(&kf.pose.inverse());
    let (w, h) = (k.width as f64, k.height as f64);
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in (stride / 2..kf.frame.height()).step_by(stride) {
        for u in (stride / 2..kf.frame.width()).step_by(stride) {
            let d = *kf.frame.depth.get(u, v);
            if d <= 0.0 {
                continue;
            }
            let p = PixelPoint::new(u as f64, v as f64);
            let x = kf_to_current.transform_point(&unproject(&p, d, k)?);
            let Ok(q) = project_mono(&x, k) else {
                continue;
            };
            if q.u < -0.5 || q.u >= w - 0.5 || q.v < -0.5 || q.v >= h - 0.5 {
                continue;
            }
            sum += ((q.u - p.u).powi(2) + (q.v - p.v).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(SlamError::DegenerateParallax);
    }
    Ok(sum / n as f64)
}

/// True for the first frame, when parallax to the latest keyframe exceeds the
/// threshold, or when parallax cannot be measured.
pub fn select_keyframe(
    latest: Option<&Keyframe>,
    current: &Frame,
    current_pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> bool {
    let Some(kf) = latest else {
        return true;
    };
    match average_parallax(kf, current, current_pose, k, cfg.grid_stride) {
        Ok(p) => p > cfg.parallax_threshold,
        Err(_) => true,
    }
}

/// Mapping objective for one keyframe: every pixel with valid depth supervises.
pub fn mapping_loss(
    map: &GaussianMap,
    kf: &Keyframe,
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<LossEvaluation> {
    let out = render(map, &kf.pose, k, &RenderOptions::default());
    masked_l1_loss(
        out,
        &kf.frame,
        cfg.lambda_color,
        cfg.lambda_depth,
        MAP_DEPTH_MIN_SILHOUETTE,
        |_, z| z > 0.0,
    )
}

pub fn window_loss(map: &GaussianMap, window: &[Keyframe], k: &CameraIntrinsics, cfg: &MappingConfig) -> Result<f64> {
    let mut total = 0.0;
    for kf in window {
        total += mapping_loss(map, kf, k, cfg)?.loss;
    }
    Ok(total / window.len() as f64)
}

/// Adam moments for the eight parameters of every primitive.
struct Adam {
    m: Vec<[f64; 8]>,
    v: Vec<[f64; 8]>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; 8]; n],
            v: vec![[0.0; 8]; n],
            t: 0,
        }
    }

    fn step(&mut self, map: &mut GaussianMap, grads: &[[f64; 8]], lrs: &[f64; 8]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, g) in map.primitives_mut().iter_mut().enumerate() {
            let mut params = [
                g.center.x, g.center.y, g.center.z, g.radius, g.opacity, g.color[0], g.color[1], g.color[2],
            ];
            for j in 0..8 {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grads[i][j];
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grads[i][j] * grads[i][j];
                let denom = (*v / bc2).sqrt() + ADAM_EPS;
                params[j] -= lrs[j] * (*m / bc1) / denom;
            }
            g.center = Vector3::new(params[0], params[1], params[2]);
            g.radius = params[3];
            g.opacity = params[4];
            g.color = [params[5], params[6], params[7]];
            g.clamp();
        }
    }
}

/// Refines primitive parameters against a window of keyframes whose poses stay
/// fixed. Keyframes are visited round-robin; returns the final mean window loss.
pub fn optimize_scene(
    map: &mut GaussianMap,
    window: &[Keyframe],
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<f64> {
    if window.is_empty() {
        return Err(SlamError::EmptyWindow);
    }
    if map.is_empty() {
        return Err(SlamError::EmptyMap);
    }
    cfg.validate()?;

    let mut lrs = [
        cfg.lr_center, cfg.lr_center, cfg.lr_center, cfg.lr_radius, cfg.lr_opacity, cfg.lr_color,
        cfg.lr_color, cfg.lr_color,
    ];
    let mut adam = Adam::new(map.len());
    let mut best_loss = window_loss(map, window, k, cfg)?;
    let mut best_map = map.clone();
    if best_loss == 0.0 {
        return Ok(0.0);
    }

    let epoch_len = window.len();
    let mut grads = vec![[0.0; 8]; map.len()];
    for it in 0..cfg.map_iters {
        let kf = &window[it % epoch_len];
        let eval = mapping_loss(map, kf, k, cfg)?;
        let gs = render_backward(&eval.render, &eval.pixel_grads)?;
        for (dst, g) in grads.iter_mut().zip(&gs.primitives) {
            *dst = [
                g.center.x, g.center.y, g.center.z, g.radius, g.opacity, g.color[0], g.color[1], g.color[2],
            ];
        }
        adam.step(map, &grads, &lrs);

        let epoch_done = (it + 1) % epoch_len == 0 || it + 1 == cfg.map_iters;
        if epoch_done {
            let loss = window_loss(map, window, k, cfg)?;
            if loss <= best_loss {
                best_loss = loss;
                best_map.clone_from(map);
            } else if cfg.backtracking {
                map.clone_from(&best_map);
                lrs.iter_mut().for_each(|lr| *lr *= 0.5);
            }
        }
    }
    if cfg.backtracking {
        map.clone_from(&best_map);
        Ok(best_loss)
    } else {
        window_loss(map, window, k, cfg)
    }
}

/// One mapping event for a new keyframe: densify from it, refine over the
/// trailing window, then prune. Returns (added, final loss, removed).
pub fn map_keyframe(
    map: &mut GaussianMap,
    keyframes: &[Keyframe],
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
    densify: bool,
) -> Result<(usize, f64, usize)> {
    let newest = keyframes.last().ok_or(SlamError::EmptyWindow)?;
    let added = if densify {
        let out = render(map, &newest.pose, k, &RenderOptions { keep_cache: false });
        map.densify(&newest.frame, &newest.pose, &out, k, &cfg.densify, newest.index as u32)?
    } else {
        0
    };
    let start = keyframes.len().saturating_sub(cfg.window_size);
    let loss = optimize_scene(map, &keyframes[start..], k, cfg)?;
    let removed = map.prune(&cfg.prune);
    Ok((added, loss, removed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_map::GaussianPrimitive;
    use crate::raster::Image;
    use nalgebra::UnitQuaternion;

    fn k(w: usize, h: usize, f: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
    }

    fn plane_frame(w: usize, h: usize, z: f64) -> Frame {
        Frame::new(0.0, Image::filled(w, h, [0.5; 3]), Image::filled(w, h, z)).unwrap()
    }

    fn keyframe(frame: Frame, pose: Pose) -> Keyframe {
        Keyframe { frame, pose, index: 0 }
    }

    #[test]
    fn identical_pose_has_zero_parallax() {
        let kk = k(64, 48, 50.0);
        let pose = Pose::new(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(0.1, 0.2, 0.3));
        let kf = keyframe(plane_frame(64, 48, 2.0), pose);
        // The unproject/project round trip leaves only rounding residue.
        assert!(average_parallax(&kf, &kf.frame, &pose, &kk, 8).unwrap() < 1e-12);
    }

    #[test]
    fn dolly_toward_plane_matches_closed_form() {
        let kk = k(64, 48, 50.0);
        let z = 2.0;
        let dz = 0.2;
        let kf = keyframe(plane_frame(64, 48, z), Pose::identity());
        // Moving forward by dz: world-to-camera translation is -dz along z.
        let current = Pose::identity().translate(&Vector3::new(0.0, 0.0, -dz));
        let got = average_parallax(&kf, &kf.frame, &current, &kk, 8).unwrap();

        // Oracle: pixel offsets from the principal point scale by z / (z - dz).
        let scale = z / (z - dz);
        let (mut sum, mut n) = (0.0, 0);
        for v in (4..48).step_by(8) {
            for u in (4..64).step_by(8) {
                let (du, dv) = (u as f64 - kk.cx, v as f64 - kk.cy);
                let (nu, nv) = (kk.cx + du * scale, kk.cy + dv * scale);
                if nu >= -0.5 && nu < 63.5 && nv >= -0.5 && nv < 47.5 {
                    sum += (du * du + dv * dv).sqrt() * (scale - 1.0);
                    n += 1;
                }
            }
        }
        assert!(got > 0.0);
        assert!((got - sum / n as f64).abs() < 1e-9, "{got} vs {}", sum / n as f64);
    }

    #[test]
    fn in_plane_rotation_displaces_by_chord_length() {
        let kk = k(64, 64, 40.0);
        let theta: f64 = 0.05;
        let kf = keyframe(plane_frame(64, 64, 3.0), Pose::identity());
        let current = Pose::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta), Vector3::zeros());
        let got = average_parallax(&kf, &kf.frame, &current, &kk, 8).unwrap();

        let (mut sum, mut n) = (0.0, 0);
        for v in (4..64).step_by(8) {
            for u in (4..64).step_by(8) {
                let (du, dv) = (u as f64 - kk.cx, v as f64 - kk.cy);
                let (c, s) = (theta.cos(), theta.sin());
                let (nu, nv) = (kk.cx + c * du - s * dv, kk.cy + s * du + c * dv);
                if nu >= -0.5 && nu < 63.5 && nv >= -0.5 && nv < 63.5 {
                    let rho = (du * du + dv * dv).sqrt();
                    sum += 2.0 * rho * (theta / 2.0).sin();
                    n += 1;
                }
            }
        }
        assert!((got - sum / n as f64).abs() < 1e-9);
    }

    #[test]
    fn degenerate_parallax_selects_keyframe() {
        let kk = k(16, 16, 16.0);
        let kf = keyframe(plane_frame(16, 16, 0.0), Pose::identity());
        assert!(matches!(
            average_parallax(&kf, &kf.frame, &Pose::identity(), &kk, 4),
            Err(SlamError::DegenerateParallax)
        ));
        let cfg = MappingConfig::default();
        assert!(select_keyframe(Some(&kf), &kf.frame, &Pose::identity(), &kk, &cfg));
        assert!(select_keyframe(None, &kf.frame, &Pose::identity(), &kk, &cfg));
        let still = keyframe(plane_frame(16, 16, 2.0), Pose::identity());
        assert!(!select_keyframe(Some(&still), &still.frame, &Pose::identity(), &kk, &cfg));
    }

    #[test]
    fn self_rendered_keyframe_does_not_drift() {
        let kk = k(24, 24, 24.0);
        let map = GaussianMap::from_primitives(vec![
            GaussianPrimitive { center: Vector3::new(0.0, 0.0, 2.0), radius: 0.6, opacity: 1.0, color: [0.2, 0.5, 0.7] },
            GaussianPrimitive { center: Vector3::new(0.3, -0.2, 2.5), radius: 0.4, opacity: 0.7, color: [0.9, 0.1, 0.3] },
        ]);
        let frame = render(&map, &Pose::identity(), &kk, &RenderOptions::default()).to_frame(0.0, MAP_DEPTH_MIN_SILHOUETTE);
        let window = [keyframe(frame, Pose::identity())];
        let mut m = map.clone();
        let loss = optimize_scene(&mut m, &window, &kk, &MappingConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(m, map);
    }

    #[test]
    fn color_converges_to_target() {
        let kk = k(9, 9, 9.0);
        let mut map = GaussianMap::from_primitives(vec![GaussianPrimitive {
            center: Vector3::new(0.0, 0.0, 2.0),
            radius: 0.5,
            opacity: 1.0,
            color: [0.0, 1.0, 0.0],
        }]);
        let target = Frame::new(0.0, Image::filled(9, 9, [1.0, 0.0, 0.0]), Image::filled(9, 9, 2.0)).unwrap();
        let cfg = MappingConfig {
            map_iters: 200,
            lr_color: 2e-2,
            lr_center: 0.0,
            lr_radius: 0.0,
            lr_opacity: 0.0,
            ..Default::default()
        };
        let window = [keyframe(target, Pose::identity())];
        optimize_scene(&mut map, &window, &kk, &cfg).unwrap();
        let c = map.primitives()[0].color;
        assert!((c[0] - 1.0).abs() < 1e-2 && c[1].abs() < 1e-2 && c[2].abs() < 1e-2, "{c:?}");
    }

    #[test]
    fn opacity_stays_clamped_under_aggressive_steps() {
        let kk = k(12, 12, 12.0);
        let mut map = GaussianMap::from_primitives(
            (0..6)
                .map(|i| GaussianPrimitive {
                    center: Vector3::new(-0.5 + 0.2 * i as f64, 0.1, 2.0 + 0.1 * i as f64),
                    radius: 0.2,
                    opacity: 0.5,
                    color: [0.5; 3],
                })
                .collect(),
        );
        let mut frame = plane_frame(12, 12, 1.8);
        for (i, c) in frame.rgb.data.iter_mut().enumerate() {
            *c = if i % 2 == 0 { [1.0; 3] } else { [0.0; 3] };
        }
        let cfg = MappingConfig {
            map_iters: 1000,
            lr_opacity: 0.5,
            lr_color: 0.5,
            backtracking: false,
            ..Default::default()
        };
        optimize_scene(&mut map, &[keyframe(frame, Pose::identity())], &kk, &cfg).unwrap();
        for g in map.primitives() {
            assert!((0.0..=1.0).contains(&g.opacity));
            assert!(g.is_valid());
        }
    }

    #[test]
    fn empty_window_is_rejected() {
        let kk = k(8, 8, 8.0);
        let mut map = GaussianMap::from_primitives(vec![GaussianPrimitive {
            center: Vector3::new(0.0, 0.0, 2.0),
            radius: 0.5,
            opacity: 1.0,
            color: [0.5; 3],
        }]);
        assert!(matches!(
            optimize_scene(&mut map, &[], &kk, &MappingConfig::default()),
            Err(SlamError::EmptyWindow)
        ));
    }
}

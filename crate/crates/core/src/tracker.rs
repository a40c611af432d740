//! Camera tracking by inverse rendering against the current map.
//!
//! The pose is refined with alternating rotation-only and translation-only
//! gradient steps. Each group uses a fixed step length along its normalized
//! gradient that is halved whenever a trial step fails to lower the loss and
//! restored at the start of every round. Only improving steps are accepted,
//! so the returned pose is the best one seen.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Result, SlamError};
use crate::gaussian_map::GaussianMap;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::splat_render::{render, render_backward, GradientSet, PixelGradients, RenderOptions, RenderOutput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub iters_rotation: usize,
    pub iters_translation: usize,
    pub outer_rounds: usize,
    /// Rotation step length in radians.
    pub lr_rotation: f64,
    /// Translation step length in meters.
    pub lr_translation: f64,
    pub lambda_color: f64,
    pub lambda_depth: f64,
    /// Pixels whose silhouette does not exceed this are ignored.
    pub visibility_threshold: f64,
    /// Pivot rotation steps about the centroid of the observed depth points
    /// instead of the world origin. Yaw about the camera and sideways motion
    /// shift the image almost identically, so alternating between them
    /// converges very slowly unless the rotation pivots inside the scene.
    pub rotate_about_centroid: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            iters_rotation: 5,
            iters_translation: 5,
            outer_rounds: 10,
            lr_rotation: 2e-3,
            lr_translation: 1e-3,
            lambda_color: 0.5,
            lambda_depth: 1.0,
            visibility_threshold: 0.99,
            rotate_about_centroid: true,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SlamError::Config(format!("tracking: {m}")));
        if self.iters_rotation == 0 || self.iters_translation == 0 || self.outer_rounds == 0 {
            return bad("iteration counts must be at least 1");
        }
        if !(self.lr_rotation > 0.0 && self.lr_translation > 0.0) {
            return bad("step lengths must be positive");
        }
        if self.lambda_color < 0.0 || self.lambda_depth < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.lambda_color == 0.0 && self.lambda_depth == 0.0 {
            return bad("loss weights cannot both be zero");
        }
        if !(self.visibility_threshold > 0.0 && self.visibility_threshold < 1.0) {
            return bad("visibility threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingResult {
    pub pose: Pose,
    pub final_loss: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Loss value with its per-pixel gradients and the render that produced it.
#[derive(Clone, Debug)]
pub struct LossEvaluation {
    pub loss: f64,
    pub pixels: usize,
    pub pixel_grads: PixelGradients,
    pub render: RenderOutput,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean of `l_c |C - I|_1 + l_d |D/S - Z|` over pixels accepted by `include(S, Z)`.
/// The depth term is skipped where `S <= depth_min_silhouette`.
pub(crate) fn masked_l1_loss(
    render: RenderOutput,
    frame: &Frame,
    lambda_color: f64,
    lambda_depth: f64,
    depth_min_silhouette: f64,
    include: impl Fn(f64, f64) -> bool,
) -> Result<LossEvaluation> {
    frame.rgb.same_shape(&render.rgb)?;
    let n = render.rgb.len();
    let mask: Vec<bool> = (0..n)
        .map(|i| include(render.silhouette.data[i], frame.depth.data[i]))
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(SlamError::UntrackableFrame);
    }
    let inv = 1.0 / count as f64;
    let mut grads = PixelGradients::zeros(n);
    let mut total = 0.0;
    for i in (0..n).filter(|&i| mask[i]) {
        let c = render.rgb.data[i];
        let obs = frame.rgb.data[i];
        let mut term = 0.0;
        for ch in 0..3 {
            let r = c[ch] - obs[ch];
            term += lambda_color * r.abs();
            grads.rgb[i][ch] = lambda_color * sign(r) * inv;
        }
        let s = render.silhouette.data[i];
        let z = frame.depth.data[i];
        if lambda_depth > 0.0 && z > 0.0 && s > depth_min_silhouette {
            let d = render.depth.data[i];
            let r = d / s - z;
            term += lambda_depth * r.abs();
            let g = lambda_depth * sign(r) * inv;
            grads.depth[i] = g / s;
            grads.silhouette[i] = -g * d / (s * s);
        }
        total += term;
    }
    Ok(LossEvaluation {
        loss: total * inv,
        pixels: count,
        pixel_grads: grads,
        render,
    })
}

/// Tracking objective: only pixels with valid depth and a silhouette above the
/// visibility threshold contribute.
pub fn tracking_loss(
    map: &GaussianMap,
    pose: &Pose,
    frame: &Frame,
    k: &CameraIntrinsics,
    cfg: &TrackingConfig,
) -> Result<LossEvaluation> {
    if map.is_empty() {
        return Err(SlamError::EmptyMap);
    }
    let out = render(map, pose, k, &RenderOptions::default());
    let tau = cfg.visibility_threshold;
    masked_l1_loss(out, frame, cfg.lambda_color, cfg.lambda_depth, tau, |s, z| {
        s > tau && z > 0.0
    })
}

/// Full gradient (map and pose) of an evaluated loss.
pub fn loss_gradient(eval: &LossEvaluation) -> Result<GradientSet> {
    render_backward(&eval.render, &eval.pixel_grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Rotation,
    Translation,
}

/// One trial step, reported to an optional observer.
#[derive(Clone, Copy, Debug)]
pub struct TrackStep {
    pub round: usize,
    pub kind: StepKind,
    pub from: Pose,
    pub trial: Pose,
    /// `None` when the trial pose left no visible pixel.
    pub trial_loss: Option<f64>,
    pub accepted: bool,
    /// Lowest loss seen after this step.
    pub best_loss: f64,
}

/// Mean camera-frame position of the observed depth samples.
pub fn observed_centroid(frame: &Frame, k: &CameraIntrinsics) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for v in 0..frame.height() {
        for u in 0..frame.width() {
            let z = *frame.depth.get(u, v);
            if z > 0.0 {
                sum += Vector3::new((u as f64 - k.cx) * z / k.fx, (v as f64 - k.cy) * z / k.fy, z);
                n += 1;
            }
        }
    }
    if n == 0 {
        sum
    } else {
        sum / n as f64
    }
}

/// Estimates the world-to-camera pose of `frame`, starting from `init`.
pub fn track_frame(
    map: &GaussianMap,
    frame: &Frame,
    init: &Pose,
    k: &CameraIntrinsics,
    cfg: &TrackingConfig,
) -> Result<TrackingResult> {
    track_frame_observed(map, frame, init, k, cfg, |_| {})
}

pub fn track_frame_observed(
    map: &GaussianMap,
    frame: &Frame,
    init: &Pose,
    k: &CameraIntrinsics,
    cfg: &TrackingConfig,
    mut observe: impl FnMut(&TrackStep),
) -> Result<TrackingResult> {
    cfg.validate()?;
    if map.is_empty() {
        return Err(SlamError::EmptyMap);
    }
    frame.check_intrinsics(k)?;

    let first = tracking_loss(map, init, frame, k, cfg)?;
    let initial_loss = first.loss;
    let mut pose = *init;
    let mut loss = first.loss;
    let mut grad = loss_gradient(&first)?;
    drop(first);

    let use_pivot = cfg.rotate_about_centroid;
    let pivot = observed_centroid(frame, k);
    let mut iterations_used = 0;
    let mut converged = false;
    let mut diverging_rounds = 0;

    for round in 0..cfg.outer_rounds {
        let round_start = loss;
        // Step lengths shrink within a round and restart with the next one.
        let mut lr = [cfg.lr_rotation, cfg.lr_translation];
        let mut round_min_trial = f64::INFINITY;
        for (kind, iters) in [
            (StepKind::Rotation, cfg.iters_rotation),
            (StepKind::Translation, cfg.iters_translation),
        ] {
            let slot = kind as usize;
            for _ in 0..iters {
                let g = match kind {
                    StepKind::Rotation if use_pivot => grad.rotation + (pose.translation - pivot).cross(&grad.translation),
                    StepKind::Rotation => grad.rotation,
                    StepKind::Translation => grad.translation,
                };
                let norm = g.norm();
                if loss == 0.0 || !(norm > 0.0) || !norm.is_finite() {
                    break;
                }
                let step = g * (-lr[slot] / norm);
                let trial = match kind {
                    StepKind::Rotation if use_pivot => pose.rotate_about(&step, &pivot),
                    StepKind::Rotation => pose.rotate_left(&step),
                    StepKind::Translation => pose.translate(&step),
                };
                iterations_used += 1;
                let eval = match tracking_loss(map, &trial, frame, k, cfg) {
                    Ok(e) => Some(e),
                    Err(SlamError::UntrackableFrame) => None,
                    Err(e) => return Err(e),
                };
                let trial_loss = eval.as_ref().map(|e| e.loss);
                let accepted = matches!(trial_loss, Some(l) if l < loss);
                let from = pose;
                if let Some(l) = trial_loss {
                    round_min_trial = round_min_trial.min(l);
                }
                if accepted {
                    let eval = eval.unwrap();
                    grad = loss_gradient(&eval)?;
                    pose = trial;
                    loss = eval.loss;
                } else {
                    lr[slot] *= 0.5;
                }
                observe(&TrackStep {
                    round,
                    kind,
                    from,
                    trial,
                    trial_loss,
                    accepted,
                    best_loss: loss,
                });
            }
        }

        if round_min_trial.is_finite() && round_min_trial > 10.0 * initial_loss {
            diverging_rounds += 1;
            if diverging_rounds >= 2 {
                return Err(SlamError::TrackingLost {
                    best_pose: Box::new(pose),
                    best_loss: loss,
                });
            }
        } else {
            diverging_rounds = 0;
        }

        let decrease = if round_start > 0.0 {
            (round_start - loss) / round_start
        } else {
            0.0
        };
        if decrease < 1e-5 {
            converged = true;
            break;
        }
    }

    Ok(TrackingResult {
        pose,
        final_loss: loss,
        iterations_used,
        converged,
    })
}

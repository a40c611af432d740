//! Pinhole intrinsics, rigid poses, and the monocular / rectified-stereo projections.
//!
//! Conventions: pixel centers sit at integer coordinates with the origin at the
//! top-left, `u` to the right and `v` down. A [`Pose`] maps world points into the
//! camera frame (`x_c = R x_w + t`); trajectories store the inverse.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Stereo baseline in meters; only the stereo projection reads it.
    #[serde(default)]
    pub baseline: Option<f64>,
    /// Raw depth units per meter.
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    5000.0
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            baseline: None,
            depth_scale: default_depth_scale(),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn with_baseline(mut self, baseline: f64) -> Self {
        self.baseline = Some(baseline);
        self
    }

    pub fn with_depth_scale(mut self, depth_scale: f64) -> Result<Self> {
        self.depth_scale = depth_scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SlamError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive ({}, {})", self.fx, self.fy));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad(format!("cx = {} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad(format!("cy = {} outside (0, {})", self.cy, self.height));
        }
        if !(self.depth_scale > 0.0) {
            return bad(format!("depth_scale = {} must be positive", self.depth_scale));
        }
        Ok(())
    }

    /// Intrinsics for an image box-downsampled by `factor`, keeping the
    /// integer-pixel-center convention.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor <= 1 {
            return Ok(*self);
        }
        let f = factor as f64;
        let half = (f - 1.0) / 2.0;
        let k = Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx - half) / f,
            cy: (self.cy - half) / f,
            width: self.width / factor,
            height: self.height / factor,
            ..*self
        };
        k.validate()?;
        Ok(k)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid transform stored as a unit quaternion and a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    /// Builds a pose from raw quaternion components `(qx, qy, qz, qw)`.
    pub fn from_parts(translation: [f64; 3], quat_xyzw: [f64; 4]) -> Self {
        let [x, y, z, w] = quat_xyzw;
        Self {
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            translation: Vector3::from(translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transform_vector(x) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self {
            rotation: rinv,
            translation: -(rinv.transform_vector(&self.translation)),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation.transform_vector(&other.translation) + self.translation,
        }
    }

    /// Left-multiplies the rotation by `exp(axis_angle)`; translation is untouched.
    pub fn rotate_left(&self, axis_angle: &Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(UnitQuaternion::from_scaled_axis(*axis_angle) * self.rotation),
            translation: self.translation,
        }
    }

    /// Rotates the camera by `exp(axis_angle)` about the camera-frame point
    /// `pivot`, which keeps its camera coordinates.
    pub fn rotate_about(&self, axis_angle: &Vector3<f64>, pivot: &Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_scaled_axis(*axis_angle);
        Self {
            rotation: renormalize(q * self.rotation),
            translation: q * (self.translation - pivot) + pivot,
        }
    }

    /// Adds `delta` to the translation; rotation is untouched.
    pub fn translate(&self, delta: &Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation: self.translation + delta,
        }
    }

    /// Angle in radians of the relative rotation between two poses.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Linear interpolation of translation, spherical-linear of rotation.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Self {
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, s, 1e-12)
            .unwrap_or(self.rotation);
        Self {
            rotation: renormalize(rotation),
            translation: self.translation.lerp(&other.translation, s),
        }
    }

    /// Camera center in world coordinates for a world-to-camera pose.
    pub fn camera_center(&self) -> Vector3<f64> {
        self.inverse().translation
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    /// Right-image column for rectified stereo.
    pub u_right: Option<f64>,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v, u_right: None }
    }
}

/// Monocular pinhole projection of a camera-frame point.
pub fn project_mono(x: &Vector3<f64>, k: &CameraIntrinsics) -> Result<PixelPoint> {
    if !(x.z > 0.0) {
        return Err(SlamError::BehindCamera { z: x.z });
    }
    Ok(PixelPoint::new(
        k.fx * x.x / x.z + k.cx,
        k.fy * x.y / x.z + k.cy,
    ))
}

/// Rectified stereo projection; the third coordinate is the right-camera column.
pub fn project_stereo(x: &Vector3<f64>, k: &CameraIntrinsics) -> Result<PixelPoint> {
    let b = k
        .baseline
        .ok_or_else(|| SlamError::Config("stereo projection requires a baseline".into()))?;
    let mut p = project_mono(x, k)?;
    p.u_right = Some(k.fx * (x.x - b) / x.z + k.cx);
    Ok(p)
}

/// Back-projects a pixel at metric depth into the camera frame.
pub fn unproject(p: &PixelPoint, depth: f64, k: &CameraIntrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(SlamError::InvalidDepth { depth });
    }
    Ok(Vector3::new(
        (p.u - k.cx) / k.fx * depth,
        (p.v - k.cy) / k.fy * depth,
        depth,
    ))
}

pub fn transform_point(pose: &Pose, x: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(x)
}

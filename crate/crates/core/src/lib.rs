//! Dense RGB-D SLAM with an explicit map of isotropic 3D Gaussians.
//!
//! The map is rendered with a tile-based CPU splatting rasterizer whose
//! backward pass yields analytic gradients for both the primitives and the
//! camera pose. Tracking inverts the renderer for the pose with the map held
//! fixed; mapping inverts it for the primitives over a window of keyframes.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod gaussian_map;
pub mod geometry;
pub mod mapper;
pub mod pipeline;
pub mod raster;
pub mod splat_render;
pub mod tracker;

pub use dataset::{Frame, Trajectory};
pub use error::{Result, SlamError};
pub use gaussian_map::{GaussianMap, GaussianPrimitive};
pub use geometry::{CameraIntrinsics, Pose};
pub use pipeline::{run_slam, PipelineConfig, RunState};
pub use raster::{Image, RgbImage, ScalarImage};
pub use splat_render::{render, render_backward, RenderOutput};

//! Differentiable tile rasterizer for isotropic Gaussians.
//!
//! Each primitive is splatted to an image-space disc with weight
//! `f(p) = o * exp(-|p - center|^2 / (2 rho^2))`, cut to exactly zero beyond
//! `3 rho`. Per pixel, contributors are composited front to back:
//!
//! ```text
//!   T_1 = 1,  T_{i+1} = T_i (1 - f_i)
//!   C = sum c_i f_i T_i,   D = sum d_i f_i T_i,   S = sum f_i T_i
//! ```
//!
//! The forward pass caches `(contributor, f_i)` per pixel so the backward pass can
//! replay the transmittances without dividing by `1 - f_i`.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::dataset::Frame;
use crate::error::{Result, SlamError};
use crate::gaussian_map::{GaussianMap, GaussianPrimitive};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::raster::{Image, RgbImage, ScalarImage};

pub const TILE_SIZE: usize = 16;
/// Weights vanish beyond this many image-space radii.
pub const CUTOFF_SIGMAS: f64 = 3.0;
/// Compositing stops once transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-7;
/// Primitives whose camera-frame depth is at or below this are culled.
pub const Z_NEAR: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    /// Keep the per-pixel contributor cache needed by [`render_backward`].
    pub keep_cache: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { keep_cache: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub center2d: [f64; 2],
    /// Camera-frame z of the center.
    pub depth: f64,
    pub radius2d: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub source_index: usize,
    /// Center in the camera frame.
    pub camera_point: Vector3<f64>,
}

/// Splats one primitive; `None` when it sits at or behind the near plane.
pub fn project_gaussian(
    source_index: usize,
    g: &GaussianPrimitive,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Option<ProjectedGaussian> {
    let xc = pose.transform_point(&g.center);
    if !(xc.z > Z_NEAR) || !xc.iter().all(|x| x.is_finite()) {
        return None;
    }
    let inv_z = 1.0 / xc.z;
    Some(ProjectedGaussian {
        center2d: [k.fx * xc.x * inv_z + k.cx, k.fy * xc.y * inv_z + k.cy],
        depth: xc.z,
        radius2d: g.radius * k.fx * inv_z,
        opacity: g.opacity,
        color: g.color,
        source_index,
        camera_point: xc,
    })
}

/// Weight of a splat at pixel position `p`.
#[inline]
pub fn eval_weight(g: &ProjectedGaussian, p: [f64; 2]) -> f64 {
    let dx = p[0] - g.center2d[0];
    let dy = p[1] - g.center2d[1];
    let dist2 = dx * dx + dy * dy;
    let r2 = g.radius2d * g.radius2d;
    if dist2 > CUTOFF_SIGMAS * CUTOFF_SIGMAS * r2 {
        return 0.0;
    }
    g.opacity * (-dist2 / (2.0 * r2)).exp()
}

/// Projects every primitive and orders the survivors front to back
/// (ties broken by map index).
pub fn project_and_sort(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics) -> Vec<ProjectedGaussian> {
    let mut projected: Vec<ProjectedGaussian> = map
        .primitives()
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(i, g, pose, k))
        .collect();
    projected.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.source_index.cmp(&b.source_index))
    });
    projected
}

#[derive(Clone, Debug)]
struct TileContrib {
    /// `offsets[i]..offsets[i + 1]` indexes `entries` for local pixel `i`.
    offsets: Vec<u32>,
    /// (position in the tile's splat list, weight f).
    entries: Vec<(u32, f64)>,
}

/// Everything the backward pass needs from a forward render.
#[derive(Clone, Debug)]
pub struct RenderCache {
    pub projected: Vec<ProjectedGaussian>,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub n_primitives: usize,
    tile_lists: Vec<Vec<u32>>,
    tile_contrib: Vec<TileContrib>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: RgbImage,
    pub depth: ScalarImage,
    pub silhouette: ScalarImage,
    pub cache: Option<RenderCache>,
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    width: usize,
    height: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize) -> Self {
        Self {
            tiles_x: width.div_ceil(TILE_SIZE),
            tiles_y: height.div_ceil(TILE_SIZE),
            width,
            height,
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel rectangle `[u0, u1) x [v0, v1)` of a tile.
    fn bounds(&self, tile: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let u0 = tx * TILE_SIZE;
        let v0 = ty * TILE_SIZE;
        (
            u0,
            (u0 + TILE_SIZE).min(self.width),
            v0,
            (v0 + TILE_SIZE).min(self.height),
        )
    }

    /// Bins splats (already depth-sorted) by a one-pixel-padded bounding box of
    /// their cutoff disc, so every tile list is a superset of its true contributors.
    fn bin(&self, projected: &[ProjectedGaussian]) -> Vec<Vec<u32>> {
        let mut lists = vec![Vec::new(); self.count()];
        if self.width == 0 || self.height == 0 {
            return lists;
        }
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        for (i, g) in projected.iter().enumerate() {
            let reach = CUTOFF_SIGMAS * g.radius2d + 1.0;
            let [u, v] = g.center2d;
            if !(u + reach >= 0.0 && u - reach <= wmax && v + reach >= 0.0 && v - reach <= hmax) {
                continue;
            }
            let u_lo = (u - reach).max(0.0).floor() as usize / TILE_SIZE;
            let u_hi = (u + reach).min(wmax).ceil() as usize / TILE_SIZE;
            let v_lo = (v - reach).max(0.0).floor() as usize / TILE_SIZE;
            let v_hi = (v + reach).min(hmax).ceil() as usize / TILE_SIZE;
            for ty in v_lo..=v_hi.min(self.tiles_y - 1) {
                for tx in u_lo..=u_hi.min(self.tiles_x - 1) {
                    lists[ty * self.tiles_x + tx].push(i as u32);
                }
            }
        }
        lists
    }
}

struct TileForward {
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
    silhouette: Vec<f64>,
    contrib: Option<TileContrib>,
}

fn render_tile(
    grid: &TileGrid,
    tile: usize,
    list: &[u32],
    projected: &[ProjectedGaussian],
    keep_cache: bool,
) -> TileForward {
    let (u0, u1, v0, v1) = grid.bounds(tile);
    let npix = (u1 - u0) * (v1 - v0);
    let mut out = TileForward {
        rgb: Vec::with_capacity(npix),
        depth: Vec::with_capacity(npix),
        silhouette: Vec::with_capacity(npix),
        contrib: None,
    };
    let mut offsets = Vec::with_capacity(if keep_cache { npix + 1 } else { 0 });
    let mut entries = Vec::new();
    if keep_cache {
        offsets.push(0);
    }
    for v in v0..v1 {
        for u in u0..u1 {
            let px = [u as f64, v as f64];
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            let mut depth = 0.0;
            let mut sil = 0.0;
            for (local, &gi) in list.iter().enumerate() {
                let g = &projected[gi as usize];
                let f = eval_weight(g, px);
                if f <= 0.0 {
                    continue;
                }
                if keep_cache {
                    entries.push((local as u32, f));
                }
                let w = f * t;
                rgb[0] += g.color[0] * w;
                rgb[1] += g.color[1] * w;
                rgb[2] += g.color[2] * w;
                depth += g.depth * w;
                sil += w;
                t *= 1.0 - f;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            out.rgb.push(rgb);
            out.depth.push(depth);
            out.silhouette.push(sil);
            if keep_cache {
                offsets.push(entries.len() as u32);
            }
        }
    }
    if keep_cache {
        out.contrib = Some(TileContrib { offsets, entries });
    }
    out
}

/// Renders color, raw depth and silhouette of `map` seen from `pose`.
/// Background is black with zero depth and zero silhouette.
pub fn render(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics, opts: &RenderOptions) -> RenderOutput {
    let (w, h) = (k.width, k.height);
    let projected = project_and_sort(map, pose, k);
    let grid = TileGrid::new(w, h);
    let tile_lists = grid.bin(&projected);

    let tiles: Vec<TileForward> = (0..grid.count())
        .into_par_iter()
        .map(|t| render_tile(&grid, t, &tile_lists[t], &projected, opts.keep_cache))
        .collect();

    let mut rgb = Image::filled(w, h, [0.0; 3]);
    let mut depth = Image::filled(w, h, 0.0);
    let mut silhouette = Image::filled(w, h, 0.0);
    for (t, tile) in tiles.iter().enumerate() {
        let (u0, u1, v0, v1) = grid.bounds(t);
        let mut i = 0;
        for v in v0..v1 {
            for u in u0..u1 {
                *rgb.get_mut(u, v) = tile.rgb[i];
                *depth.get_mut(u, v) = tile.depth[i];
                *silhouette.get_mut(u, v) = tile.silhouette[i];
                i += 1;
            }
        }
    }

    let cache = opts.keep_cache.then(|| RenderCache {
        tile_contrib: tiles.into_iter().map(|t| t.contrib.unwrap()).collect(),
        tile_lists,
        projected,
        pose: *pose,
        intrinsics: *k,
        n_primitives: map.len(),
    });

    RenderOutput {
        rgb,
        depth,
        silhouette,
        cache,
    }
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// `D / S` where the silhouette exceeds `min_silhouette`, else 0.
    pub fn normalized_depth(&self, min_silhouette: f64) -> ScalarImage {
        Image {
            width: self.depth.width,
            height: self.depth.height,
            data: self
                .depth
                .data
                .iter()
                .zip(&self.silhouette.data)
                .map(|(&d, &s)| if s > min_silhouette { d / s } else { 0.0 })
                .collect(),
        }
    }

    /// Ordered `(map index, weight)` contributors of pixel `(u, v)`.
    pub fn contributors(&self, u: usize, v: usize) -> Result<Vec<(usize, f64)>> {
        let cache = self.cache.as_ref().ok_or(SlamError::MissingContributorCache)?;
        let grid = TileGrid::new(self.width(), self.height());
        let tile = (v / TILE_SIZE) * grid.tiles_x + u / TILE_SIZE;
        let (u0, u1, v0, _) = grid.bounds(tile);
        let local = (v - v0) * (u1 - u0) + (u - u0);
        let tc = &cache.tile_contrib[tile];
        let list = &cache.tile_lists[tile];
        let range = tc.offsets[local] as usize..tc.offsets[local + 1] as usize;
        Ok(tc.entries[range]
            .iter()
            .map(|&(l, f)| (cache.projected[list[l as usize] as usize].source_index, f))
            .collect())
    }

    /// Turns the render into an RGB-D observation; depth is normalized and left
    /// invalid where the silhouette does not exceed `min_silhouette`.
    pub fn to_frame(&self, timestamp: f64, min_silhouette: f64) -> Frame {
        Frame {
            timestamp,
            rgb: self.rgb.clone(),
            depth: self.normalized_depth(min_silhouette),
        }
    }

    /// Writes `<stem>_rgb.png`, `<stem>_depth.png` (16-bit) and `<stem>_sil.png`.
    pub fn write_pngs(&self, dir: &std::path::Path, stem: &str, depth_scale: f64) -> Result<()> {
        self.rgb.write_png(&dir.join(format!("{stem}_rgb.png")))?;
        self.normalized_depth(0.0)
            .write_depth_png(&dir.join(format!("{stem}_depth.png")), depth_scale)?;
        self.silhouette
            .write_png_unit(&dir.join(format!("{stem}_sil.png")))
    }
}

/// Upstream loss gradients with respect to every rendered pixel value.
#[derive(Clone, Debug)]
pub struct PixelGradients {
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
}

impl PixelGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            rgb: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            silhouette: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrimitiveGradient {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    /// Indexed like the map that was rendered.
    pub primitives: Vec<PrimitiveGradient>,
    /// Gradient w.r.t. a left axis-angle perturbation `R <- exp(w) R`.
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

// Image-space gradient slots per splat.
const G_U: usize = 0;
const G_V: usize = 1;
const G_RHO: usize = 2;
const G_O: usize = 3;
const G_C: usize = 4;
const G_D: usize = 7;
const N_SLOTS: usize = 8;

fn backward_tile(
    grid: &TileGrid,
    tile: usize,
    cache: &RenderCache,
    grads: &PixelGradients,
) -> Vec<[f64; N_SLOTS]> {
    let list = &cache.tile_lists[tile];
    let tc = &cache.tile_contrib[tile];
    let mut acc = vec![[0.0; N_SLOTS]; list.len()];
    let (u0, u1, v0, v1) = grid.bounds(tile);
    let mut trans = Vec::new();
    let mut local_px = 0;
    for v in v0..v1 {
        for u in u0..u1 {
            let entries = &tc.entries[tc.offsets[local_px] as usize..tc.offsets[local_px + 1] as usize];
            local_px += 1;
            let pix = v * grid.width + u;
            let gc = grads.rgb[pix];
            let gd = grads.depth[pix];
            let gs = grads.silhouette[pix];
            if entries.is_empty() || (gc == [0.0; 3] && gd == 0.0 && gs == 0.0) {
                continue;
            }
            trans.clear();
            let mut t = 1.0;
            for &(_, f) in entries {
                trans.push(t);
                t *= 1.0 - f;
            }
            let px = [u as f64, v as f64];
            let mut g_t_next = 0.0;
            for (&(local, f), &t_i) in entries.iter().zip(&trans).rev() {
                let g = &cache.projected[list[local as usize] as usize];
                let q = gc[0] * g.color[0] + gc[1] * g.color[1] + gc[2] * g.color[2]
                    + gd * g.depth
                    + gs;
                let w = f * t_i;
                let df = t_i * (q - g_t_next);
                g_t_next = q * f + g_t_next * (1.0 - f);

                let slot = &mut acc[local as usize];
                slot[G_C] += gc[0] * w;
                slot[G_C + 1] += gc[1] * w;
                slot[G_C + 2] += gc[2] * w;
                slot[G_D] += gd * w;

                let dx = px[0] - g.center2d[0];
                let dy = px[1] - g.center2d[1];
                let inv_r2 = 1.0 / (g.radius2d * g.radius2d);
                let dff = df * f;
                slot[G_U] += dff * dx * inv_r2;
                slot[G_V] += dff * dy * inv_r2;
                slot[G_RHO] += dff * (dx * dx + dy * dy) * inv_r2 / g.radius2d;
                slot[G_O] += df * f / g.opacity;
            }
        }
    }
    acc
}

/// Chains per-pixel loss gradients back to every primitive parameter and to the
/// camera pose.
pub fn render_backward(out: &RenderOutput, grads: &PixelGradients) -> Result<GradientSet> {
    let cache = out.cache.as_ref().ok_or(SlamError::MissingContributorCache)?;
    let n = out.width() * out.height();
    if grads.rgb.len() != n || grads.depth.len() != n || grads.silhouette.len() != n {
        return Err(SlamError::DimensionMismatch(out.width(), out.height(), grads.rgb.len(), 1));
    }
    let grid = TileGrid::new(out.width(), out.height());
    let per_tile: Vec<Vec<[f64; N_SLOTS]>> = (0..grid.count())
        .into_par_iter()
        .map(|t| backward_tile(&grid, t, cache, grads))
        .collect();

    // Fixed merge order keeps results independent of thread scheduling.
    let mut image_space = vec![[0.0; N_SLOTS]; cache.projected.len()];
    for (t, acc) in per_tile.iter().enumerate() {
        for (local, slot) in acc.iter().enumerate() {
            let dst = &mut image_space[cache.tile_lists[t][local] as usize];
            for s in 0..N_SLOTS {
                dst[s] += slot[s];
            }
        }
    }

    let k = &cache.intrinsics;
    let rot = cache.pose.rotation;
    let mut primitives = vec![PrimitiveGradient::default(); cache.n_primitives];
    let mut rotation = Vector3::zeros();
    let mut translation = Vector3::zeros();
    for (g, s) in cache.projected.iter().zip(&image_space) {
        if s.iter().all(|&x| x == 0.0) {
            continue;
        }
        let p = g.camera_point;
        let inv_z = 1.0 / p.z;
        let d_cam = Vector3::new(
            s[G_U] * k.fx * inv_z,
            s[G_V] * k.fy * inv_z,
            -(s[G_U] * k.fx * p.x + s[G_V] * k.fy * p.y) * inv_z * inv_z
                - s[G_RHO] * g.radius2d * inv_z
                + s[G_D],
        );
        primitives[g.source_index] = PrimitiveGradient {
            center: rot.inverse_transform_vector(&d_cam),
            radius: s[G_RHO] * k.fx * inv_z,
            opacity: s[G_O],
            color: [s[G_C], s[G_C + 1], s[G_C + 2]],
        };
        translation += d_cam;
        rotation += (p - cache.pose.translation).cross(&d_cam);
    }

    Ok(GradientSet {
        primitives,
        rotation,
        translation,
    })
}

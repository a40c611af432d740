//! Trajectory and image-quality metrics, and report emission.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage as PngRgb};
use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{Result, SlamError};
use crate::raster::{Image, RgbImage, ScalarImage};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
/// Timestamp tolerance when pairing estimated and reference poses.
pub const ATE_MATCH_TOLERANCE: f64 = 0.02;

/// Rotation and translation minimizing `sum |R a_i + t - b_i|^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidAlignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidAlignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Closed-form least-squares rigid alignment (Kabsch/Umeyama without scale)
/// mapping `source` onto `target`.
pub fn rigid_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<RigidAlignment> {
    if source.len() != target.len() || source.is_empty() {
        return Err(SlamError::InsufficientOverlap {
            matched: source.len().min(target.len()),
            required: 1,
        });
    }
    let n = source.len() as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() / n;
    let mu_t = target.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        cov += (t - mu_t) * (s - mu_s).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = u * fix * v_t;
    Ok(RigidAlignment {
        rotation,
        translation: mu_t - rotation * mu_s,
    })
}

pub fn rmse_after_alignment(source: &[Vector3<f64>], target: &[Vector3<f64>], a: &RigidAlignment) -> f64 {
    let sum: f64 = source
        .iter()
        .zip(target)
        .map(|(s, t)| (a.apply(s) - t).norm_squared())
        .sum();
    (sum / source.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AteResult {
    pub rmse: f64,
    pub alignment: RigidAlignment,
    /// (timestamp, position error) per matched pose.
    pub errors: Vec<(f64, f64)>,
}

/// Pairs estimated and reference timestamps within `tolerance`, nearest first.
pub fn match_trajectories(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let a: Vec<f64> = est.entries().iter().map(|e| e.0).collect();
    let b: Vec<f64> = gt.entries().iter().map(|e| e.0).collect();
    crate::dataset::associate(&a, &b, tolerance)
}

/// Absolute trajectory error of camera positions after rigid alignment.
pub fn ate(est: &Trajectory, gt: &Trajectory) -> Result<AteResult> {
    let pairs = match_trajectories(est, gt, ATE_MATCH_TOLERANCE);
    if pairs.len() < 3 {
        return Err(SlamError::InsufficientOverlap {
            matched: pairs.len(),
            required: 3,
        });
    }
    let src: Vec<_> = pairs.iter().map(|&(i, _)| est.entries()[i].1.translation).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| gt.entries()[j].1.translation).collect();
    let alignment = rigid_align(&src, &dst)?;
    let errors = pairs
        .iter()
        .zip(src.iter().zip(&dst))
        .map(|(&(i, _), (s, t))| (est.entries()[i].0, (alignment.apply(s) - t).norm()))
        .collect();
    Ok(AteResult {
        rmse: rmse_after_alignment(&src, &dst, &alignment),
        alignment,
        errors,
    })
}

pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ate(est, gt).map(|r| r.rmse)
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(rendered: &RgbImage, reference: &RgbImage) -> Result<f64> {
    rendered.same_shape(reference)?;
    if rendered.is_empty() {
        return Err(SlamError::UndefinedMetric("psnr of an empty image".into()));
    }
    let sse: f64 = rendered
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum();
    let mse = sse / (3 * rendered.len()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// RMSE over pixels where both depths are positive and the rendered silhouette
/// exceeds `min_silhouette`.
pub fn depth_rmse(
    rendered: &ScalarImage,
    reference: &ScalarImage,
    silhouette: &ScalarImage,
    min_silhouette: f64,
) -> Result<f64> {
    rendered.same_shape(reference)?;
    rendered.same_shape(silhouette)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..rendered.len() {
        let (d, r, s) = (rendered.data[i], reference.data[i], silhouette.data[i]);
        if d > 0.0 && r > 0.0 && s > min_silhouette {
            sum += (d - r).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(SlamError::UndefinedMetric("no valid depth pixels".into()));
    }
    Ok((sum / n as f64).sqrt())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *w = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|w| w / s)
}

/// Separable Gaussian filter over the fully-covered ("valid") region.
fn filter_valid(img: &ScalarImage, k: &[f64; SSIM_WINDOW]) -> ScalarImage {
    let ow = img.width + 1 - SSIM_WINDOW;
    let oh = img.height + 1 - SSIM_WINDOW;
    let mut rows = Image::filled(ow, img.height, 0.0);
    for v in 0..img.height {
        for u in 0..ow {
            *rows.get_mut(u, v) = (0..SSIM_WINDOW).map(|i| k[i] * img.get(u + i, v)).sum();
        }
    }
    let mut out = Image::filled(ow, oh, 0.0);
    for v in 0..oh {
        for u in 0..ow {
            *out.get_mut(u, v) = (0..SSIM_WINDOW).map(|i| k[i] * rows.get(u, v + i)).sum();
        }
    }
    out
}

/// Mean SSIM map and mean contrast-structure term of two grayscale images.
fn ssim_terms(x: &ScalarImage, y: &ScalarImage) -> Result<(f64, f64)> {
    x.same_shape(y)?;
    if x.width < SSIM_WINDOW || x.height < SSIM_WINDOW {
        return Err(SlamError::UndefinedMetric(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }
    let k = gaussian_kernel();
    let prod = |a: &ScalarImage, b: &ScalarImage| Image {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(p, q)| p * q).collect::<Vec<_>>(),
    };
    let mx = filter_valid(x, &k);
    let my = filter_valid(y, &k);
    let sxx = filter_valid(&prod(x, x), &k);
    let syy = filter_valid(&prod(y, y), &k);
    let sxy = filter_valid(&prod(x, y), &k);
    let n = mx.len() as f64;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mx.len() {
        let (a, b) = (mx.data[i], my.data[i]);
        let var_x = sxx.data[i] - a * a;
        let var_y = syy.data[i] - b * b;
        let cov = sxy.data[i] - a * b;
        let cs = (2.0 * cov + SSIM_C2) / (var_x + var_y + SSIM_C2);
        let lum = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        ssim_sum += lum * cs;
        cs_sum += cs;
    }
    Ok((ssim_sum / n, cs_sum / n))
}

/// Single-scale SSIM on luma with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(rendered: &RgbImage, reference: &RgbImage) -> Result<f64> {
    rendered.same_shape(reference)?;
    ssim_gray(&rendered.to_gray(), &reference.to_gray())
}

pub fn ssim_gray(x: &ScalarImage, y: &ScalarImage) -> Result<f64> {
    ssim_terms(x, y).map(|t| t.0)
}

fn halve(img: &ScalarImage) -> ScalarImage {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = Image::filled(w, h, 0.0);
    for v in 0..h {
        for u in 0..w {
            *out.get_mut(u, v) = 0.25
                * (img.get(2 * u, 2 * v)
                    + img.get(2 * u + 1, 2 * v)
                    + img.get(2 * u, 2 * v + 1)
                    + img.get(2 * u + 1, 2 * v + 1));
        }
    }
    out
}

/// Five-scale MS-SSIM; images must be at least 176 pixels on each side.
pub fn ms_ssim(rendered: &RgbImage, reference: &RgbImage) -> Result<f64> {
    rendered.same_shape(reference)?;
    let (mut x, mut y) = (rendered.to_gray(), reference.to_gray());
    let mut value = 1.0;
    for (level, w) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (s, cs) = ssim_terms(&x, &y)?;
        if level + 1 == MS_SSIM_WEIGHTS.len() {
            value *= s.max(0.0).powf(*w);
        } else {
            value *= cs.max(0.0).powf(*w);
            x = halve(&x);
            y = halve(&y);
        }
    }
    Ok(value)
}

/// Per-frame training-view metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub timestamp: f64,
    pub psnr: f64,
    pub depth_rmse: Option<f64>,
    pub ssim: Option<f64>,
    pub ate_error: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ate_rmse: Option<f64>,
    pub psnr_mean: f64,
    pub depth_rmse_mean: Option<f64>,
    pub ssim_mean: Option<f64>,
    #[serde(skip)]
    pub frames: Vec<FrameMetrics>,
}

#[derive(Serialize)]
struct Summary<'a> {
    ate_rmse: Option<f64>,
    psnr_mean: f64,
    depth_rmse_mean: Option<f64>,
    ssim_mean: Option<f64>,
    frames: usize,
    psnr_views: &'a str,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// Aggregates per-frame metrics; `ate` attaches trajectory errors by timestamp.
    pub fn from_frames(mut frames: Vec<FrameMetrics>, ate: Option<&AteResult>) -> Self {
        if let Some(a) = ate {
            for f in &mut frames {
                f.ate_error = a
                    .errors
                    .iter()
                    .find(|(t, _)| (t - f.timestamp).abs() < 1e-9)
                    .map(|e| e.1);
            }
        }
        Self {
            ate_rmse: ate.map(|a| a.rmse),
            psnr_mean: mean_of(frames.iter().map(|f| f.psnr)).unwrap_or(f64::NAN),
            depth_rmse_mean: mean_of(frames.iter().filter_map(|f| f.depth_rmse)),
            ssim_mean: mean_of(frames.iter().filter_map(|f| f.ssim)),
            frames,
        }
    }

    /// Writes `metrics.csv` (per frame) and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv_path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&csv_path)
            .map_err(|e| SlamError::io(&csv_path, std::io::Error::other(e)))?;
        for f in &self.frames {
            w.serialize(f)
                .map_err(|e| SlamError::io(&csv_path, std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| SlamError::io(&csv_path, e))?;

        let summary = Summary {
            ate_rmse: self.ate_rmse,
            psnr_mean: self.psnr_mean,
            depth_rmse_mean: self.depth_rmse_mean,
            ssim_mean: self.ssim_mean,
            frames: self.frames.len(),
            psnr_views: "training",
        };
        let json_path = dir.join("summary.json");
        let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&json_path, body).map_err(|e| SlamError::io(&json_path, e))
    }
}

/// Top-down (x-z) plot of estimated (red) and reference (green) camera paths.
pub fn plot_trajectories(est: &Trajectory, gt: Option<&Trajectory>, path: &Path) -> Result<()> {
    const SIZE: u32 = 400;
    const MARGIN: f64 = 20.0;
    let mut img = PngRgb::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let series: Vec<(Vec<(f64, f64)>, Rgb<u8>)> = gt
        .into_iter()
        .map(|g| (g, Rgb([0, 160, 0])))
        .chain(std::iter::once((est, Rgb([200, 0, 0]))))
        .map(|(t, c)| {
            (
                t.entries().iter().map(|(_, p)| (p.translation.x, p.translation.z)).collect(),
                c,
            )
        })
        .collect();
    let all = series.iter().flat_map(|s| s.0.iter());
    let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
    for &(x, z) in all {
        lo = (lo.0.min(x), lo.1.min(z));
        hi = (hi.0.max(x), hi.1.max(z));
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-6);
    let scale = (SIZE as f64 - 2.0 * MARGIN) / span;
    let to_px = |(x, z): (f64, f64)| (MARGIN + (x - lo.0) * scale, SIZE as f64 - MARGIN - (z - lo.1) * scale);
    for (pts, color) in &series {
        for seg in pts.windows(2) {
            let (a, b) = (to_px(seg[0]), to_px(seg[1]));
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                let (x, y) = (a.0 + (b.0 - a.0) * f, a.1 + (b.1 - a.1) * f);
                if x >= 0.0 && y >= 0.0 && (x as u32) < SIZE && (y as u32) < SIZE {
                    img.put_pixel(x as u32, y as u32, *color);
                }
            }
        }
    }
    img.save(path).map_err(|source| SlamError::Image {
        path: path.to_path_buf(),
        source,
    })
}

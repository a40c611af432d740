#![allow(dead_code)]

use gsslam::raster::Image;
use gsslam::{CameraIntrinsics, Frame, GaussianMap, GaussianPrimitive, Pose, RenderOutput};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NEAR: f64 = 0.01;
pub const STOP_TRANSMITTANCE: f64 = 1e-7;

/// One splat as the oracle sees it.
#[derive(Clone, Copy, Debug)]
pub struct Splat {
    pub index: usize,
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub rho: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

pub fn splats(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics) -> Vec<Splat> {
    let mut out = Vec::new();
    for (index, g) in map.primitives().iter().enumerate() {
        let xc = pose.rotation.transform_vector(&g.center) + pose.translation;
        if !(xc.z > NEAR) || !xc.iter().all(|x| x.is_finite()) {
            continue;
        }
        let inv_z = 1.0 / xc.z;
        out.push(Splat {
            index,
            u: k.fx * xc.x * inv_z + k.cx,
            v: k.fy * xc.y * inv_z + k.cy,
            z: xc.z,
            rho: g.radius * k.fx * inv_z,
            opacity: g.opacity,
            color: g.color,
        });
    }
    // Insertion sort: stable, and independent of the library's sort.
    for i in 1..out.len() {
        let mut j = i;
        while j > 0 && (out[j - 1].z > out[j].z || (out[j - 1].z == out[j].z && out[j - 1].index > out[j].index)) {
            out.swap(j - 1, j);
            j -= 1;
        }
    }
    out
}

pub fn weight(s: &Splat, u: f64, v: f64) -> f64 {
    let dx = u - s.u;
    let dy = v - s.v;
    let d2 = dx * dx + dy * dy;
    let r2 = s.rho * s.rho;
    if d2 > 3.0 * 3.0 * r2 {
        0.0
    } else {
        s.opacity * (-d2 / (2.0 * r2)).exp()
    }
}

pub struct NaiveRender {
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
}

/// Per-pixel loop over every splat, front to back.
pub fn naive_render(map: &GaussianMap, pose: &Pose, k: &CameraIntrinsics) -> NaiveRender {
    let list = splats(map, pose, k);
    let n = k.width * k.height;
    let mut r = NaiveRender { rgb: vec![[0.0; 3]; n], depth: vec![0.0; n], silhouette: vec![0.0; n] };
    for v in 0..k.height {
        for u in 0..k.width {
            let i = v * k.width + u;
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut d = 0.0;
            let mut s = 0.0;
            for sp in &list {
                let f = weight(sp, u as f64, v as f64);
                if f <= 0.0 {
                    continue;
                }
                let w = f * t;
                c[0] += sp.color[0] * w;
                c[1] += sp.color[1] * w;
                c[2] += sp.color[2] * w;
                d += sp.z * w;
                s += w;
                t *= 1.0 - f;
                if t < STOP_TRANSMITTANCE {
                    break;
                }
            }
            r.rgb[i] = c;
            r.depth[i] = d;
            r.silhouette[i] = s;
        }
    }
    r
}

/// `1 - prod(1 - f)` over every splat covering the pixel, with no early exit.
pub fn full_product_silhouette(list: &[Splat], u: usize, v: usize) -> f64 {
    let mut t = 1.0;
    for sp in list {
        t *= 1.0 - weight(sp, u as f64, v as f64);
    }
    1.0 - t
}

pub fn intrinsics(w: usize, h: usize, f: f64) -> CameraIntrinsics {
    CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
}

pub struct Scene {
    pub map: GaussianMap,
    pub pose: Pose,
    pub k: CameraIntrinsics,
}

/// Random splat scene: primitives scattered through the view frustum (a few
/// behind the camera or at equal depth), viewed from a perturbed pose.
pub fn random_scene(seed: u64, max_side: usize, max_prims: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rng.random_range(8..=max_side);
    let h = rng.random_range(8..=max_side);
    let f = rng.random_range(0.8..1.5) * w.max(h) as f64;
    let k = intrinsics(w, h, f);
    let n = rng.random_range(1..=max_prims);
    let mut prims = Vec::with_capacity(n);
    for i in 0..n {
        let z = if rng.random_bool(0.05) { rng.random_range(-1.0..0.01) } else { rng.random_range(0.5..4.0) };
        let z = if i > 0 && rng.random_bool(0.05) { prims.last().map(|p: &GaussianPrimitive| p.center.z).unwrap() } else { z };
        let x = rng.random_range(-0.7..0.7) * z.abs() * w as f64 / f;
        let y = rng.random_range(-0.7..0.7) * z.abs() * h as f64 / f;
        let rho_px = rng.random_range(0.3..8.0);
        prims.push(GaussianPrimitive {
            center: Vector3::new(x, y, z),
            radius: rho_px * z.abs().max(0.5) / f,
            opacity: rng.random_range(0.05..1.0),
            color: [rng.random(), rng.random(), rng.random()],
        });
    }
    let pose = Pose::new(
        UnitQuaternion::from_scaled_axis(Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        )),
        Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)),
    );
    Scene { map: GaussianMap::from_primitives(prims), pose, k }
}

/// Compares the tile renderer against the oracle bit for bit.
pub fn bit_identical(out: &RenderOutput, naive: &NaiveRender) -> bool {
    let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
    out.rgb.data.iter().zip(&naive.rgb).all(|(a, b)| (0..3).all(|c| same(a[c], b[c])))
        && out.depth.data.iter().zip(&naive.depth).all(|(a, b)| same(*a, *b))
        && out.silhouette.data.iter().zip(&naive.silhouette).all(|(a, b)| same(*a, *b))
}

/// Observation whose color and depth differ from `out` by a fixed offset at
/// every pixel, so no L1 residual sits near its kink.
pub fn offset_frame(out: &RenderOutput, offset: f64) -> Frame {
    let rgb = out
        .rgb
        .data
        .iter()
        .map(|c| c.map(|x| if x > 0.5 { x - offset } else { x + offset }))
        .collect();
    let depth = out
        .depth
        .data
        .iter()
        .zip(&out.silhouette.data)
        .map(|(d, s)| if *s > 0.0 { d / s + offset } else { 1.0 })
        .collect();
    Frame::new(
        0.0,
        Image::from_vec(out.width(), out.height(), rgb).unwrap(),
        Image::from_vec(out.width(), out.height(), depth).unwrap(),
    )
    .unwrap()
}

/// Which (pixel, splat) pairs are active and which pixels pass `gates`; a finite
/// difference is only meaningful when this is the same at both probes.
pub fn structure(out: &RenderOutput, gates: &[f64]) -> Vec<u64> {
    let mut sig = Vec::with_capacity(out.rgb.len() * 2);
    for v in 0..out.height() {
        for u in 0..out.width() {
            let c = out.contributors(u, v).unwrap();
            sig.push(c.len() as u64);
            sig.extend(c.iter().map(|e| e.0 as u64));
            let s = *out.silhouette.get(u, v);
            sig.push(gates.iter().enumerate().map(|(i, g)| ((s > *g) as u64) << i).sum());
        }
    }
    sig
}

/// Relative error with a floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Small well-conditioned scene for finite-difference checks: radii of at
/// least 1.5 px so a 1e-4 step stays in the quadratic regime.
pub fn gradient_scene(seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = rng.random_range(8..=16);
    let h = rng.random_range(8..=16);
    let f = w.max(h) as f64;
    let k = intrinsics(w, h, f);
    let n = rng.random_range(3..=8);
    let prims = (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(1.0..3.0);
            GaussianPrimitive {
                center: Vector3::new(
                    rng.random_range(-0.4..0.4) * z * w as f64 / f,
                    rng.random_range(-0.4..0.4) * z * h as f64 / f,
                    z,
                ),
                radius: rng.random_range(1.5..5.0) * z / f,
                opacity: rng.random_range(0.1..0.9),
                color: [rng.random(), rng.random(), rng.random()],
            }
        })
        .collect();
    let pose = Pose::new(
        UnitQuaternion::from_scaled_axis(Vector3::new(
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
        )),
        Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)),
    );
    Scene { map: GaussianMap::from_primitives(prims), pose, k }
}

#[derive(Debug, Default)]
pub struct GradientReport {
    pub max_primitive_err: f64,
    pub max_pose_err: f64,
    pub checked: usize,
    /// Probes discarded because the step changed which splats touch a pixel
    /// or which pixels pass a gate.
    pub skipped: usize,
}

pub const FD_STEP: f64 = 1e-4;

/// Central differences of `loss` against `analytic` for every scalar of the
/// map and the pose. `loss` returns (value, render) for structure checks.
pub fn finite_difference_check(
    map: &GaussianMap,
    pose: &Pose,
    gates: &[f64],
    analytic: &gsslam::splat_render::GradientSet,
    loss: impl Fn(&GaussianMap, &Pose) -> (f64, RenderOutput),
) -> GradientReport {
    let h = FD_STEP;
    let base = structure(&loss(map, pose).1, gates);
    let mut report = GradientReport::default();
    let mut probe = |plus: (GaussianMap, Pose), minus: (GaussianMap, Pose), a: f64, is_pose: bool| {
        let (lp, rp) = loss(&plus.0, &plus.1);
        let (lm, rm) = loss(&minus.0, &minus.1);
        if structure(&rp, gates) != base || structure(&rm, gates) != base {
            report.skipped += 1;
            return;
        }
        let e = rel_err(a, (lp - lm) / (2.0 * h));
        let slot = if is_pose { &mut report.max_pose_err } else { &mut report.max_primitive_err };
        *slot = slot.max(e);
        report.checked += 1;
    };
    for i in 0..map.len() {
        let g = &analytic.primitives[i];
        let mut analytic_params = vec![g.center.x, g.center.y, g.center.z, g.radius, g.opacity];
        analytic_params.extend(g.color);
        for (p, a) in analytic_params.into_iter().enumerate() {
            let bump = |delta: f64| {
                let mut m = map.clone();
                let q = &mut m.primitives_mut()[i];
                match p {
                    0..=2 => q.center[p] += delta,
                    3 => q.radius += delta,
                    4 => q.opacity += delta,
                    _ => q.color[p - 5] += delta,
                }
                (m, *pose)
            };
            probe(bump(h), bump(-h), a, false);
        }
    }
    for axis in 0..3 {
        let e = Vector3::ith(axis, h);
        probe((map.clone(), pose.rotate_left(&e)), (map.clone(), pose.rotate_left(&-e)), analytic.rotation[axis], true);
        probe((map.clone(), pose.translate(&e)), (map.clone(), pose.translate(&-e)), analytic.translation[axis], true);
    }
    report
}

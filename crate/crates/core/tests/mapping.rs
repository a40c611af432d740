mod common;

use common::{intrinsics, naive_render};
use gsslam::gaussian_map::DensifyConfig;
use gsslam::mapper::{map_keyframe, optimize_scene, Keyframe, MappingConfig};
use gsslam::raster::Image;
use gsslam::splat_render::RenderOptions;
use gsslam::{render, Frame, GaussianMap, GaussianPrimitive, Pose};
use nalgebra::{UnitQuaternion, Vector3};

/// Opaque primitives tiling the left half of the view at 3 m.
fn left_wall() -> GaussianMap {
    let mut prims = Vec::new();
    for i in 0..12 {
        for j in 0..24 {
            prims.push(GaussianPrimitive {
                center: Vector3::new(-1.4 + 0.1 * i as f64, -1.2 + 0.1 * j as f64, 3.0),
                radius: 0.08,
                opacity: 1.0,
                color: [0.8, 0.2, 0.2],
            });
        }
    }
    GaussianMap::from_primitives(prims)
}

#[test]
fn densify_adds_exactly_the_uncovered_pixels() {
    let k = intrinsics(40, 32, 40.0);
    let wall = left_wall();
    let mut depth = Image::filled(40, 32, 3.0);
    for i in (0..depth.data.len()).step_by(7) {
        depth.data[i] = 0.0;
    }
    let frame = Frame::new(0.0, Image::filled(40, 32, [0.3; 3]), depth).unwrap();
    let cfg = DensifyConfig::default();

    let oracle = naive_render(&wall, &Pose::identity(), &k);
    let expected = (0..frame.depth.data.len())
        .filter(|&i| {
            let z = frame.depth.data[i];
            let s = oracle.silhouette[i];
            z > 0.0 && (s < cfg.silhouette_threshold || (oracle.depth[i] / s - z).abs() > cfg.depth_error_ratio * z)
        })
        .count();
    // Roughly the right half, minus invalid pixels.
    assert!(expected > 400 && expected < 800, "{expected}");

    let mut map = wall.clone();
    let out = render(&map, &Pose::identity(), &k, &RenderOptions { keep_cache: false });
    let added = map.densify(&frame, &Pose::identity(), &out, &k, &cfg, 1).unwrap();
    assert_eq!(added, expected);
    assert_eq!(map.len(), wall.len() + added);
    assert!(map.epochs()[wall.len()..].iter().all(|&e| e == 1));
}

#[test]
fn mapping_never_moves_keyframe_poses() {
    let k = intrinsics(24, 24, 24.0);
    let frame = render(&left_wall(), &Pose::identity(), &k, &RenderOptions::default()).to_frame(0.0, 0.5);
    let poses = [
        Pose::identity(),
        Pose::new(UnitQuaternion::from_euler_angles(0.01, -0.02, 0.0), Vector3::new(0.03, 0.0, -0.01)),
    ];
    let window: Vec<Keyframe> = poses.iter().enumerate().map(|(i, p)| Keyframe { frame: frame.clone(), pose: *p, index: i }).collect();
    let before: Vec<Pose> = window.iter().map(|kf| kf.pose).collect();
    let mut map = GaussianMap::initialize_from_frame(&frame, &k).unwrap();
    let cfg = MappingConfig { map_iters: 5, ..MappingConfig::default() };
    optimize_scene(&mut map, &window, &k, &cfg).unwrap();
    map_keyframe(&mut map, &window, &k, &cfg, true).unwrap();
    for (kf, p) in window.iter().zip(&before) {
        assert_eq!(kf.pose.rotation.coords, p.rotation.coords);
        assert_eq!(kf.pose.translation, p.translation);
    }
    assert!(map.primitives().iter().all(|g| g.is_valid()));
}

#[test]
fn optimize_and_prune_do_not_lower_keyframe_psnr() {
    use gsslam::dataset::{generate_synthetic, MotionProfile, SyntheticSpec};
    use gsslam::eval::psnr;
    use gsslam::mapper::window_loss;
    let spec = SyntheticSpec { n_frames: 12, profile: MotionProfile::Orbit { total_angle_deg: 4.0 }, ..SyntheticSpec::default() };
    let scene = generate_synthetic(&spec).unwrap();
    let k = scene.intrinsics;
    let window: Vec<Keyframe> = [0, 6, 11]
        .iter()
        .map(|&i| Keyframe { frame: scene.render_frame(i), pose: scene.trajectory.entries()[i].1.inverse(), index: i })
        .collect();
    let mut map = GaussianMap::initialize_from_frame(&window[0].frame, &k).unwrap();
    let cfg = MappingConfig { map_iters: 30, ..MappingConfig::default() };
    for kf in &window[1..] {
        let out = render(&map, &kf.pose, &k, &RenderOptions { keep_cache: false });
        map.densify(&kf.frame, &kf.pose, &out, &k, &cfg.densify, kf.index as u32).unwrap();
    }
    let scores = |m: &GaussianMap| -> Vec<f64> {
        window
            .iter()
            .map(|kf| psnr(&render(m, &kf.pose, &k, &RenderOptions { keep_cache: false }).rgb, &kf.frame.rgb).unwrap())
            .collect()
    };
    let before = scores(&map);
    let loss_before = window_loss(&map, &window, &k, &cfg).unwrap();
    let loss = optimize_scene(&mut map, &window, &k, &cfg).unwrap();
    assert!(loss <= loss_before);
    map.prune(&cfg.prune);
    let after = scores(&map);
    for (b, a) in before.iter().zip(&after) {
        assert!(a >= b, "before {before:?} after {after:?}");
    }
}

/// Mean displacement of the grid pixels of `kf` reprojected into `pose`,
/// written out independently of the mapper.
fn grid_parallax(kf: &Keyframe, pose: &Pose, k: &gsslam::CameraIntrinsics, stride: usize) -> Option<f64> {
    let rel = pose.compose(&kf.pose.inverse());
    let (mut sum, mut n) = (0.0, 0);
    for v in (stride / 2..k.height).step_by(stride) {
        for u in (stride / 2..k.width).step_by(stride) {
            let d = *kf.frame.depth.get(u, v);
            if d <= 0.0 {
                continue;
            }
            let x = Vector3::new((u as f64 - k.cx) / k.fx * d, (v as f64 - k.cy) / k.fy * d, d);
            let y = rel.rotation * x + rel.translation;
            if y.z <= 0.0 {
                continue;
            }
            let (pu, pv) = (k.fx * y.x / y.z + k.cx, k.fy * y.y / y.z + k.cy);
            if pu < -0.5 || pv < -0.5 || pu >= k.width as f64 - 0.5 || pv >= k.height as f64 - 0.5 {
                continue;
            }
            sum += ((pu - u as f64).powi(2) + (pv - v as f64).powi(2)).sqrt();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[test]
fn dolly_selects_the_frame_where_parallax_crosses_the_threshold() {
    use gsslam::dataset::{generate_synthetic, MotionProfile, SyntheticSpec};
    use gsslam::mapper::select_keyframe;
    let spec = SyntheticSpec { n_frames: 40, profile: MotionProfile::Dolly { distance: 0.4 }, ..SyntheticSpec::default() };
    let scene = generate_synthetic(&spec).unwrap();
    let k = scene.intrinsics;
    let cfg = MappingConfig { parallax_threshold: 2.0, ..MappingConfig::default() };
    let pose = |i: usize| scene.trajectory.entries()[i].1.inverse();
    let kf = Keyframe { frame: scene.render_frame(0), pose: pose(0), index: 0 };
    let crossing = (1..40).find(|&i| grid_parallax(&kf, &pose(i), &k, cfg.grid_stride).unwrap() > cfg.parallax_threshold).unwrap();
    assert!(crossing > 2 && crossing < 39, "{crossing}");
    for i in 1..=crossing {
        let selected = select_keyframe(Some(&kf), &scene.render_frame(i), &pose(i), &k, &cfg);
        assert_eq!(selected, i == crossing, "frame {i}");
    }

    let still = SyntheticSpec { n_frames: 5, profile: MotionProfile::Static, ..SyntheticSpec::default() };
    let scene = generate_synthetic(&still).unwrap();
    let kf = Keyframe { frame: scene.render_frame(0), pose: Pose::identity(), index: 0 };
    assert!(select_keyframe(None, &kf.frame, &Pose::identity(), &k, &cfg));
    for i in 1..5 {
        assert!(!select_keyframe(Some(&kf), &scene.render_frame(i), &Pose::identity(), &k, &cfg));
    }
}

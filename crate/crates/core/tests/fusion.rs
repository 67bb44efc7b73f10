//! Fusion and point-cloud metrics on analytic inputs.

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use pvsnet::fusion::{brute_force_nearest, eval_pointcloud, fuse, geometric_filter, positions, DepthView, FusionConfig, NearestIndex};
use pvsnet::geometry::{Camera, CameraIntrinsics, CameraPose, DepthRange};

const H: usize = 24;
const W: usize = 32;

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(30.0, 30.0, W as f64 / 2.0 - 0.5, H as f64 / 2.0 - 0.5).unwrap()
}

/// A camera at `(x, y, 0)` looking along +z, rendered against the plane
/// `z = depth`; its depth map is exactly `depth` everywhere.
fn plane_view(x: f64, y: f64, depth: f32) -> DepthView {
    let pose = CameraPose::look_at(Vector3::new(x, y, 0.0), Vector3::new(x, y, 1.0), -Vector3::y()).unwrap();
    let camera = Camera { intrinsics: intrinsics(), pose, range: DepthRange::new(0.5, 5.0).unwrap() };
    let rgb = vec![0.5; 3 * H * W];
    DepthView::new(camera, vec![depth; H * W], vec![true; H * W], H, W, &rgb, H, W).unwrap()
}

fn rig() -> Vec<DepthView> {
    [(0.0, 0.0), (0.05, 0.0), (-0.05, 0.0), (0.0, 0.05), (0.0, -0.05)].iter().map(|&(x, y)| plane_view(x, y, 2.0)).collect()
}

fn exact() -> FusionConfig {
    FusionConfig { merge_radius: 0.0, ..FusionConfig::default() }
}

#[test]
fn fused_plane_stays_on_the_plane() {
    let cfg = FusionConfig { min_consistent: 2, ..FusionConfig::default() };
    let mut views = rig();
    for (v, m) in views.iter_mut().zip(geometric_filter(&rig(), &cfg)) {
        v.mask = m;
    }
    let points = fuse(&views, &cfg);
    assert!(points.len() > H * W / 2, "{} points", points.len());
    for p in &points {
        assert!((p.position[2] - 2.0).abs() < 1e-4, "{:?}", p.position);
        assert_eq!(p.color, [128, 128, 128]);
    }
}

#[test]
fn min_consistent_zero_keeps_every_valid_pixel() {
    let mut views = rig();
    views[1].mask[5] = false;
    views[2].depth[7] = 0.0;
    let cfg = FusionConfig { min_consistent: 0, ..exact() };
    let masks = geometric_filter(&views, &cfg);
    assert_eq!(masks[0], views[0].mask);
    assert!(!masks[1][5]);
    let single = fuse(&views[..1], &cfg);
    assert_eq!(single.len(), H * W, "one point per pixel of a lone view");
    for (i, p) in single.iter().enumerate() {
        let want = views[0].point(i);
        assert!((Vector3::from(p.position) - want).norm() < 1e-6);
    }
}

#[test]
fn more_confirmations_than_sources_rejects_everything() {
    let cfg = FusionConfig { min_consistent: 5, ..exact() };
    let mut views = rig();
    let masks = geometric_filter(&views, &cfg);
    assert!(masks.iter().all(|m| m.iter().all(|&k| !k)));
    // Fusion only lifts pixels the masks admit.
    for (v, m) in views.iter_mut().zip(masks) {
        v.mask = m;
    }
    assert!(fuse(&views, &cfg).is_empty());
}

#[test]
fn inconsistent_depths_are_filtered() {
    let mut views = rig();
    views[0].depth[H / 2 * W + W / 2] = 2.5;
    let masks = geometric_filter(&views, &exact());
    assert!(!masks[0][H / 2 * W + W / 2]);
    assert!(masks[0][H / 2 * W + W / 2 - 3]);
}

#[test]
fn identical_clouds_score_perfectly() {
    let pts: Vec<Vector3<f64>> = (0..200).map(|i| Vector3::new((i % 20) as f64 * 0.01, (i / 20) as f64 * 0.01, 1.0)).collect();
    let r = eval_pointcloud(&pts, &pts, 1e-3);
    assert_eq!((r.accuracy, r.completeness, r.f1), (0.0, 0.0, 100.0));
    // A shifted copy: every point is exactly `shift` from its counterpart
    // and no nearer to any other.
    let shifted: Vec<Vector3<f64>> = pts.iter().map(|p| p + Vector3::new(0.0, 0.0, 0.002)).collect();
    let r = eval_pointcloud(&shifted, &pts, 1e-3);
    assert!((r.accuracy - 0.002).abs() < 1e-12 && (r.completeness - 0.002).abs() < 1e-12);
    assert_eq!(r.f1, 0.0);
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y, z)| Vector3::new(x, y, z)), 1..n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn metrics_swap_under_argument_exchange(a in cloud(60), b in cloud(60), t in 0.01f64..0.5) {
        let ab = eval_pointcloud(&a, &b, t);
        let ba = eval_pointcloud(&b, &a, t);
        prop_assert_eq!(ab.accuracy, ba.completeness);
        prop_assert_eq!(ab.completeness, ba.accuracy);
        prop_assert_eq!(ab.accuracy_pct, ba.completeness_pct);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_rigid_invariant(a in cloud(60), b in cloud(60), angles in (-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0), t in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0)) {
        let r = Rotation3::from_euler_angles(angles.0, angles.1, angles.2);
        let shift = Vector3::new(t.0, t.1, t.2);
        let move_all = |c: &[Vector3<f64>]| c.iter().map(|p| r * p + shift).collect::<Vec<_>>();
        let before = eval_pointcloud(&a, &b, 0.2);
        let after = eval_pointcloud(&move_all(&a), &move_all(&b), 0.2);
        prop_assert!((before.accuracy - after.accuracy).abs() < 1e-9);
        prop_assert!((before.completeness - after.completeness).abs() < 1e-9);
    }

    #[test]
    fn grid_index_matches_brute_force(a in cloud(120), q in cloud(40)) {
        let idx = NearestIndex::new(&a);
        let want = brute_force_nearest(&a, &q);
        for (p, w) in q.iter().zip(want) {
            prop_assert_eq!(idx.nearest(p), w);
        }
    }
}

#[test]
fn positions_preserve_order() {
    let points = fuse(&rig()[..1], &FusionConfig { min_consistent: 0, ..exact() });
    let pos = positions(&points);
    assert_eq!(pos.len(), points.len());
    assert_eq!(pos[3], Vector3::from(points[3].position));
}

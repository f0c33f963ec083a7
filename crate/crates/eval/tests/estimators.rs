use imd_core::FineMatchSet;
use imd_eval::homography::estimate_homography_points;
use imd_eval::{corner_error, estimate_homography, estimate_pose, pose_error};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intrinsics() -> Matrix3<f64> {
    Matrix3::new(220.0, 0.0, 80.0, 0.0, 220.0, 60.0, 0.0, 0.0, 1.0)
}

fn scene(seed: u64, n: usize, outlier_frac: f64) -> (FineMatchSet, Matrix3<f64>, Vector3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = intrinsics();
    let r = Rotation3::from_euler_angles(0.04, -0.09, 0.03).into_inner();
    let t = Vector3::new(0.6, 0.1, 0.08);
    let mut pts = Vec::new();
    while pts.len() < n {
        let x = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.2..1.2), rng.random_range(3.0..7.0));
        let pa = k * x;
        let xb = r * x + t;
        let pb = k * xb;
        let (xa, ya) = (pa.x / pa.z, pa.y / pa.z);
        let (u, v) = (pb.x / pb.z, pb.y / pb.z);
        if rng.random_bool(outlier_frac) {
            pts.push((xa, ya, rng.random_range(0.0..160.0), rng.random_range(0.0..120.0)));
        } else {
            pts.push((xa, ya, u, v));
        }
    }
    (FineMatchSet::from_points(pts), r, t)
}

#[test]
fn noiseless_pose_is_recovered() {
    let (m, r, t) = scene(1, 200, 0.0);
    let est = estimate_pose(&m, &intrinsics(), &intrinsics(), 0.5, 0).unwrap();
    let err = pose_error(&est.r, &est.t, &r, &t);
    assert!(err.max_deg() < 0.1, "{err:?}");
}

#[test]
fn pose_survives_outliers() {
    let (m, r, t) = scene(2, 300, 0.3);
    let est = estimate_pose(&m, &intrinsics(), &intrinsics(), 0.5, 7).unwrap();
    let err = pose_error(&est.r, &est.t, &r, &t);
    assert!(err.max_deg() < 0.5, "{err:?}");
}

#[test]
fn seven_matches_fail() {
    let (m, _, _) = scene(3, 7, 0.0);
    assert!(estimate_pose(&m, &intrinsics(), &intrinsics(), 0.5, 0).is_err());
}

#[test]
fn pose_is_deterministic() {
    let (m, _, _) = scene(4, 150, 0.3);
    let a = estimate_pose(&m, &intrinsics(), &intrinsics(), 0.5, 11).unwrap();
    let b = estimate_pose(&m, &intrinsics(), &intrinsics(), 0.5, 11).unwrap();
    assert_eq!(a, b);
}

fn warp(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = h * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

fn homography_matches(seed: u64, outlier_frac: f64) -> (FineMatchSet, Matrix3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Matrix3::new(1.05, 0.08, 4.0, -0.06, 0.97, -3.0, 2e-4, -1e-4, 1.0);
    let pts: Vec<_> = (0..200)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..128.0), rng.random_range(0.0..96.0));
            let (u, v) = if rng.random_bool(outlier_frac) {
                (rng.random_range(0.0..128.0), rng.random_range(0.0..96.0))
            } else {
                warp(&h, x, y)
            };
            (x, y, u, v)
        })
        .collect();
    (FineMatchSet::from_points(pts), h)
}

#[test]
fn noiseless_homography_is_recovered() {
    let (m, h) = homography_matches(5, 0.0);
    let est = estimate_homography(&m, 1.0, 0).unwrap();
    assert!(corner_error(&est.h, &h, (128, 96)) < 0.1);
}

#[test]
fn homography_survives_outliers() {
    let (m, h) = homography_matches(6, 0.3);
    let est = estimate_homography(&m, 1.0, 3).unwrap();
    assert!(corner_error(&est.h, &h, (128, 96)) < 0.1);
    assert!(est.inlier_count() >= 120);
}

#[test]
fn homography_is_deterministic() {
    let (m, _) = homography_matches(8, 0.4);
    assert_eq!(estimate_homography(&m, 1.0, 9).unwrap(), estimate_homography(&m, 1.0, 9).unwrap());
}

#[test]
fn collinear_points_fail() {
    let src: Vec<_> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
    assert!(estimate_homography_points(&src, &src, 1.0, 0).is_err());
}

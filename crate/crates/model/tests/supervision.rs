use imd_core::{CameraFrame, DepthMap, FineMatch, FineMatchSet, Mask};
use imd_model::coarse::ProbabilityMatrix;
use imd_model::supervision::{
    coarse_loss, fine_loss_l2, total_loss, warp_cells, warp_grid, warp_homography, GroundTruth, GtMatches,
    MotionLayer, PointWarp,
};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn h() -> Matrix3<f64> {
    Matrix3::new(1.02, 0.03, 2.5, -0.01, 0.98, -1.5, 1e-4, 5e-5, 1.0)
}

#[test]
fn homography_round_trip_is_identity() {
    let fwd = warp_homography(&h(), 8, (64, 64), (64, 64)).unwrap();
    let inv = h().try_inverse().unwrap();
    for &(x, y) in &fwd.fine_targets {
        let p = inv * Vector3::new(x, y, 1.0);
        let (u, v) = (p.x / p.z, p.y / p.z);
        let q = h() * Vector3::new(u, v, 1.0);
        assert!((q.x / q.z - x).abs() < 1e-6 && (q.y / q.z - y).abs() < 1e-6);
    }
    assert!(!fwd.is_empty());
    assert!(warp_homography(&Matrix3::zeros(), 8, (64, 64), (64, 64)).is_err());
}

#[test]
fn identity_pose_warps_cells_to_themselves() {
    let k = Matrix3::new(50.0, 0.0, 31.5, 0.0, 50.0, 31.5, 0.0, 0.0, 1.0);
    let frame = |depth| CameraFrame::new(k, Matrix3::identity(), Vector3::zeros(), depth).unwrap();
    let a = frame(Some(DepthMap::constant(64, 64, 3.0)));
    let b = frame(Some(DepthMap::constant(64, 64, 3.0)));
    let gt = warp_grid(&a, &b, 8, (64, 64), 0.2).unwrap();
    assert_eq!(gt.len(), 64);
    for (k, &(ia, ib)) in gt.coarse_pairs.iter().enumerate() {
        assert_eq!(ia, ib);
        let (cx, cy) = imd_core::cell_center(ia, 8, 8);
        assert!((gt.fine_targets[k].0 - cx).abs() < 1e-6 && (gt.fine_targets[k].1 - cy).abs() < 1e-6);
    }
    let ident = warp_homography(&Matrix3::identity(), 8, (64, 64), (64, 64)).unwrap();
    assert_eq!(gt.coarse_pairs, ident.coarse_pairs);
    assert!(warp_grid(&frame(None), &b, 8, (64, 64), 0.2).is_err());
}

#[test]
fn occluded_points_are_dropped() {
    let k = Matrix3::new(50.0, 0.0, 31.5, 0.0, 50.0, 31.5, 0.0, 0.0, 1.0);
    let a = CameraFrame::new(k, Matrix3::identity(), Vector3::zeros(), Some(DepthMap::constant(64, 64, 3.0))).unwrap();
    let b = CameraFrame::new(k, Matrix3::identity(), Vector3::zeros(), Some(DepthMap::constant(64, 64, 2.0))).unwrap();
    assert!(warp_grid(&a, &b, 8, (64, 64), 0.2).unwrap().is_empty());
    assert_eq!(warp_grid(&a, &b, 8, (64, 64), 0.6).unwrap().len(), 64);
}

fn square(x0: usize, y0: usize, side: usize) -> Mask {
    let mut m = Mask::empty(32, 32);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(x, y, true);
        }
    }
    m
}

#[test]
fn layered_warp_follows_each_instance() {
    let shift = |dx: f64, dy: f64| Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0);
    let gt = GroundTruth::Layered {
        background: shift(1.0, 0.0),
        layers: vec![MotionLayer { mask_a: square(4, 4, 8), mask_b: square(8, 4, 8), h: shift(4.0, 0.0) }],
    };
    assert_eq!(gt.warp(6.0, 6.0), Some((10.0, 6.0)));
    assert_eq!(gt.warp(20.0, 20.0), Some((21.0, 20.0)));
    // Background that slides under the moved instance is hidden.
    assert_eq!(gt.warp(12.0, 6.0), None);
    let cells = warp_cells(&gt, 8, (32, 32), (32, 32));
    assert!(cells.len() < 16 && !cells.is_empty());
}

#[test]
fn fine_l2_pairs_by_parent() {
    let gt = GtMatches { coarse_pairs: vec![(0, 0), (1, 1)], fine_targets: vec![(3.5, 3.5), (11.5, 3.5)] };
    let m = |xb: f64, parent: usize| FineMatch {
        xa: 0.0,
        ya: 0.0,
        xb,
        yb: 3.5,
        confidence: 1.0,
        coarse_parent: parent,
        low_confidence: false,
    };
    let set = FineMatchSet::new(vec![m(4.5, 0), m(11.5, 1)], (16, 8), (16, 8)).unwrap();
    let (loss, used) = fine_loss_l2(&set, &gt);
    assert_eq!(used, 2);
    assert!((loss - 0.5).abs() < 1e-12);
    assert_eq!(fine_loss_l2(&FineMatchSet::from_points(vec![]), &gt), (0.0, 0));
    assert_eq!(total_loss(1.0, 2.0, 4.0, 1.0, 0.25), 4.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coarse_loss_decreases_in_the_gt_entry(p in 0.01f64..0.98, bump in 0.001f64..0.02, gamma in prop::sample::select(vec![0.0, 1.0, 2.0])) {
        let gt = GtMatches { coarse_pairs: vec![(0, 1)], fine_targets: vec![(0.0, 0.0)] };
        let at = |v: f64| {
            let pm = ProbabilityMatrix::from_rows(&[vec![0.1, v], vec![0.3, 0.2]]).unwrap();
            imd_model::ops::scalar(&coarse_loss(&pm, &gt, gamma).unwrap()).unwrap()
        };
        let (lo, hi) = (at(p), at(p + bump));
        prop_assert!(lo >= 0.0 && hi >= 0.0);
        prop_assert!(hi < lo);
    }
}

use imd_core::{CameraFrame, FineMatchSet};
use nalgebra::{DMatrix, Matrix3, Matrix4, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EvalError, Result};
use crate::homography::{normalizer, null_vector, ransac_iterations, transform, Point};

const MAX_ITERS: usize = 2000;

/// Angular pose error in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_deg: f64,
    /// Set when either translation is zero; the translation term is then 0.
    pub degenerate: bool,
}

impl PoseError {
    pub fn max_deg(&self) -> f64 {
        self.rotation_deg.max(self.translation_deg)
    }
}

pub fn pose_error(r_est: &Matrix3<f64>, t_est: &Vector3<f64>, r_gt: &Matrix3<f64>, t_gt: &Vector3<f64>) -> PoseError {
    let c = (((r_est.transpose() * r_gt).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rotation_deg = c.acos().to_degrees();
    let (ne, ng) = (t_est.norm(), t_gt.norm());
    if ne < 1e-12 || ng < 1e-12 {
        return PoseError { rotation_deg, translation_deg: 0.0, degenerate: true };
    }
    let cos = (t_est.dot(t_gt) / (ne * ng)).abs().min(1.0);
    PoseError { rotation_deg, translation_deg: cos.acos().to_degrees(), degenerate: false }
}

/// Relative pose taking camera-A coordinates to camera-B coordinates.
pub fn relative_pose(a: &CameraFrame, b: &CameraFrame) -> (Matrix3<f64>, Vector3<f64>) {
    let r = b.r * a.r.transpose();
    (r, b.t - r * a.t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub r: Matrix3<f64>,
    /// Unit-norm translation direction.
    pub t: Vector3<f64>,
    pub inliers: Vec<bool>,
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Essential matrix for the pose `x_b = R x_a + t`.
pub fn essential_from_pose(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix3<f64> {
    skew(t) * r
}

/// Normalized eight-point estimate projected onto the essential manifold.
fn eight_point(a: &[Point], b: &[Point]) -> Option<Matrix3<f64>> {
    if a.len() < 8 {
        return None;
    }
    let ta = normalizer(a);
    let tb = normalizer(b);
    let mut m = DMatrix::zeros(a.len(), 9);
    for (i, (&p, &q)) in a.iter().zip(b).enumerate() {
        let (x, y) = transform(&ta, p);
        let (u, v) = transform(&tb, q);
        let row = [u * x, u * y, u, v * x, v * y, v, x, y, 1.0];
        for (c, val) in row.iter().enumerate() {
            m[(i, c)] = *val;
        }
    }
    let e = Matrix3::from_row_slice(&null_vector(&m));
    let e = tb.transpose() * e * ta;
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let e = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt;
    e.iter().all(|v| v.is_finite()).then_some(e)
}

fn sampson(e: &Matrix3<f64>, p: Point, q: Point) -> f64 {
    let x = Vector3::new(p.0, p.1, 1.0);
    let y = Vector3::new(q.0, q.1, 1.0);
    let ex = e * x;
    let ety = e.transpose() * y;
    let num = y.dot(&ex);
    let den = ex.x * ex.x + ex.y * ex.y + ety.x * ety.x + ety.y * ety.y;
    if den < 1e-300 {
        return f64::INFINITY;
    }
    num * num / den
}

fn triangulate(r: &Matrix3<f64>, t: &Vector3<f64>, p: Point, q: Point) -> Option<Vector3<f64>> {
    let mut a = Matrix4::zeros();
    let pb = |row: usize| nalgebra::RowVector4::new(r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]);
    let pa = |row: usize| {
        let mut v = nalgebra::RowVector4::zeros();
        v[row] = 1.0;
        v
    };
    a.set_row(0, &(p.0 * pa(2) - pa(0)));
    a.set_row(1, &(p.1 * pa(2) - pa(1)));
    a.set_row(2, &(q.0 * pb(2) - pb(0)));
    a.set_row(3, &(q.1 * pb(2) - pb(1)));
    let eig = SymmetricEigen::new(a.transpose() * a);
    let (k, _) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = eig.eigenvectors.column(k);
    if h[3].abs() < 1e-12 {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Picks the decomposition of `e` with the most points in front of both cameras.
fn decompose(e: &Matrix3<f64>, a: &[Point], b: &[Point]) -> Option<(Matrix3<f64>, Vector3<f64>, usize)> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut vt = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t0: Vector3<f64> = u.column(2).into_owned();
    let mut best: Option<(Matrix3<f64>, Vector3<f64>, usize)> = None;
    for r in [u * w * vt, u * w.transpose() * vt] {
        for t in [t0, -t0] {
            let front = a
                .iter()
                .zip(b)
                .filter(|(&p, &q)| {
                    triangulate(&r, &t, p, q).is_some_and(|x| x.z > 0.0 && (r * x + t).z > 0.0)
                })
                .count();
            if best.as_ref().is_none_or(|bst| front > bst.2) {
                best = Some((r, t, front));
            }
        }
    }
    best
}

fn to_normalized(k: &Matrix3<f64>, pts: impl Iterator<Item = (f64, f64)>) -> Result<Vec<Point>> {
    let k_inv = k.try_inverse().ok_or_else(|| EvalError::Invalid("singular intrinsics".into()))?;
    Ok(pts
        .map(|(x, y)| {
            let v = k_inv * Vector3::new(x, y, 1.0);
            (v.x / v.z, v.y / v.z)
        })
        .collect())
}

/// Seeded RANSAC over eight-point essential matrices with a Sampson threshold
/// of `ransac_px` pixels, rescaled by the mean focal length.
pub fn estimate_pose(
    matches: &FineMatchSet,
    k_a: &Matrix3<f64>,
    k_b: &Matrix3<f64>,
    ransac_px: f64,
    seed: u64,
) -> Result<PoseEstimate> {
    let n = matches.len();
    if n < 8 {
        return Err(EvalError::EstimationFailed(format!("{n} matches, at least 8 needed")));
    }
    let a = to_normalized(k_a, matches.iter().map(|m| (m.xa, m.ya)))?;
    let b = to_normalized(k_b, matches.iter().map(|m| (m.xb, m.yb)))?;
    let focal = (k_a[(0, 0)] + k_a[(1, 1)] + k_b[(0, 0)] + k_b[(1, 1)]) / 4.0;
    let thr = (ransac_px / focal).powi(2);
    let classify = |e: &Matrix3<f64>| -> (Vec<bool>, f64) {
        let mut cost = 0.0;
        let mask = a
            .iter()
            .zip(&b)
            .map(|(&p, &q)| {
                let s = sampson(e, p, q);
                cost += s.min(thr);
                s <= thr
            })
            .collect();
        (mask, cost)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64, Matrix3<f64>)> = None;
    let mut needed = MAX_ITERS;
    let mut it = 0;
    while it < needed.min(MAX_ITERS) {
        it += 1;
        let idx = sample(&mut rng, n, 8);
        let sa: Vec<Point> = idx.iter().map(|i| a[i]).collect();
        let sb: Vec<Point> = idx.iter().map(|i| b[i]).collect();
        let Some(e) = eight_point(&sa, &sb) else { continue };
        let (mask, cost) = classify(&e);
        let count = mask.iter().filter(|m| **m).count();
        if best.as_ref().is_none_or(|bst| count > bst.0 || (count == bst.0 && cost < bst.1)) {
            best = Some((count, cost, e));
            needed = ransac_iterations(count as f64 / n as f64, 8);
        }
    }
    let (_, _, mut e) = best.ok_or_else(|| EvalError::EstimationFailed("no valid hypothesis".into()))?;
    let (mut mask, _) = classify(&e);
    for _ in 0..2 {
        let ia: Vec<Point> = a.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        let ib: Vec<Point> = b.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        let Some(refit) = eight_point(&ia, &ib) else { break };
        let (m2, _) = classify(&refit);
        if m2.iter().filter(|m| **m).count() < ia.len() {
            break;
        }
        e = refit;
        mask = m2;
    }
    let ia: Vec<Point> = a.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
    let ib: Vec<Point> = b.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
    if ia.len() < 8 {
        return Err(EvalError::EstimationFailed("fewer than 8 inliers".into()));
    }
    let (r, t, front) = decompose(&e, &ia, &ib).ok_or_else(|| EvalError::EstimationFailed("decomposition failed".into()))?;
    if front == 0 {
        return Err(EvalError::EstimationFailed("no point passes the cheirality check".into()));
    }
    Ok(PoseEstimate { r, t, inliers: mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    #[test]
    fn ten_degree_rotation() {
        let gt = Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let est = gt * Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()).into_inner();
        let t = Vector3::new(0.3, 0.1, -1.0);
        let e = pose_error(&est, &t, &gt, &t);
        assert!((e.max_deg() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn translation_sign_is_ignored() {
        let r = Matrix3::identity();
        let t = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(pose_error(&r, &(-t), &r, &t).translation_deg, 0.0);
        assert!(pose_error(&r, &Vector3::zeros(), &r, &t).degenerate);
    }
}

use imd_core::geometry::apply_homography;
use imd_core::FineMatchSet;
use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EvalError, Result};

const MAX_ITERS: usize = 2000;
const CONFIDENCE: f64 = 0.999;

pub type Point = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyEstimate {
    pub h: Matrix3<f64>,
    pub inliers: Vec<bool>,
}

impl HomographyEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
pub(crate) fn normalizer(points: &[Point]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (cx, cy) = points.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let mean_dist = points.iter().map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

pub(crate) fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    (t[(0, 0)] * p.0 + t[(0, 1)] * p.1 + t[(0, 2)], t[(1, 0)] * p.0 + t[(1, 1)] * p.1 + t[(1, 2)])
}

/// Unit null vector (smallest-eigenvalue eigenvector of `A^T A`).
pub(crate) fn null_vector(a: &DMatrix<f64>) -> Vec<f64> {
    let ata = a.transpose() * a;
    let eig = SymmetricEigen::new(ata);
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty spectrum");
    eig.eigenvectors.column(k).iter().copied().collect()
}

/// Normalized direct linear transform from `>= 4` correspondences.
pub fn dlt(src: &[Point], dst: &[Point]) -> Option<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (&p, &q)) in src.iter().zip(dst).enumerate() {
        let (x, y) = transform(&ts, p);
        let (u, v) = transform(&td, q);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let h = null_vector(&a);
    let hn = Matrix3::from_row_slice(&h);
    let h = td.try_inverse()? * hn * ts;
    if h[(2, 2)].abs() < 1e-15 || !h.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(h / h[(2, 2)])
}

fn transfer_error(h: &Matrix3<f64>, p: Point, q: Point) -> f64 {
    match apply_homography(h, p.0, p.1) {
        Some((u, v)) => ((u - q.0).powi(2) + (v - q.1).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs() < 1e-6
}

fn degenerate(p: &[Point]) -> bool {
    (0..4).any(|skip| {
        let t: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| p[i]).collect();
        collinear(t[0], t[1], t[2])
    })
}

pub(crate) fn ransac_iterations(inlier_ratio: f64, sample_size: i32) -> usize {
    let w = inlier_ratio.powi(sample_size);
    if w <= 0.0 {
        return MAX_ITERS;
    }
    if w >= 1.0 {
        return 1;
    }
    ((1.0 - CONFIDENCE).ln() / (1.0 - w).ln()).ceil().min(MAX_ITERS as f64) as usize
}

fn inliers_of(h: &Matrix3<f64>, src: &[Point], dst: &[Point], thr: f64) -> (Vec<bool>, f64) {
    let mut cost = 0.0;
    let mask = src
        .iter()
        .zip(dst)
        .map(|(&p, &q)| {
            let e = transfer_error(h, p, q);
            cost += e.min(thr);
            e <= thr
        })
        .collect();
    (mask, cost)
}

/// Seeded RANSAC over 4-point DLT hypotheses, refit on the inliers.
pub fn estimate_homography(matches: &FineMatchSet, ransac_px: f64, seed: u64) -> Result<HomographyEstimate> {
    let src: Vec<Point> = matches.iter().map(|m| (m.xa, m.ya)).collect();
    let dst: Vec<Point> = matches.iter().map(|m| (m.xb, m.yb)).collect();
    estimate_homography_points(&src, &dst, ransac_px, seed)
}

pub fn estimate_homography_points(src: &[Point], dst: &[Point], ransac_px: f64, seed: u64) -> Result<HomographyEstimate> {
    let n = src.len();
    if n < 4 {
        return Err(EvalError::EstimationFailed(format!("{n} matches, at least 4 needed")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, f64, Matrix3<f64>)> = None;
    let mut needed = MAX_ITERS;
    let mut it = 0;
    while it < needed.min(MAX_ITERS) {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        let s: Vec<Point> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<Point> = idx.iter().map(|i| dst[i]).collect();
        if degenerate(&s) || degenerate(&d) {
            continue;
        }
        let Some(h) = dlt(&s, &d) else { continue };
        let (mask, cost) = inliers_of(&h, src, dst, ransac_px);
        let count = mask.iter().filter(|b| **b).count();
        if best.as_ref().is_none_or(|b| count > b.0 || (count == b.0 && cost < b.1)) {
            best = Some((count, cost, h));
            needed = ransac_iterations(count as f64 / n as f64, 4);
        }
    }
    let (_, _, mut h) = best.ok_or_else(|| EvalError::EstimationFailed("all samples degenerate".into()))?;
    let (mut mask, _) = inliers_of(&h, src, dst, ransac_px);
    for _ in 0..2 {
        let s: Vec<Point> = src.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        let d: Vec<Point> = dst.iter().zip(&mask).filter(|(_, m)| **m).map(|(p, _)| *p).collect();
        if s.len() < 4 {
            break;
        }
        match dlt(&s, &d) {
            Some(refit) => {
                let (m2, _) = inliers_of(&refit, src, dst, ransac_px);
                if m2.iter().filter(|b| **b).count() < s.len() {
                    break;
                }
                h = refit;
                mask = m2;
            }
            None => break,
        }
    }
    if mask.iter().filter(|b| **b).count() < 4 {
        return Err(EvalError::EstimationFailed("fewer than 4 inliers".into()));
    }
    Ok(HomographyEstimate { h, inliers: mask })
}

/// Mean distance between the four image corners mapped by each homography.
///
/// Corners are the image extent under the pixel-center convention,
/// `(-0.5, -0.5)` to `(W - 0.5, H - 0.5)`.
pub fn corner_error(h_est: &Matrix3<f64>, h_gt: &Matrix3<f64>, dims: (usize, usize)) -> f64 {
    let (w, h) = (dims.0 as f64 - 0.5, dims.1 as f64 - 0.5);
    let corners = [(-0.5, -0.5), (w, -0.5), (-0.5, h), (w, h)];
    corners
        .iter()
        .map(|&(x, y)| match (apply_homography(h_est, x, y), apply_homography(h_gt, x, y)) {
            (Some(a), Some(b)) => ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_moves_corners() {
        let gt = Matrix3::new(1.1, 0.05, 3.0, -0.02, 0.95, 1.0, 1e-4, 2e-4, 1.0);
        let shift = Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(corner_error(&gt, &gt, (64, 48)), 0.0);
        assert!((corner_error(&(shift * gt), &gt, (64, 48)) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_matches_fail() {
        let m = FineMatchSet::from_points(vec![(0.0, 0.0, 1.0, 1.0); 3]);
        assert!(estimate_homography(&m, 1.0, 0).is_err());
    }
}

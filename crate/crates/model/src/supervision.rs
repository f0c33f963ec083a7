//! Ground-truth correspondences and the training losses.

use candle_core::{DType, Device, Tensor, D};
use imd_core::geometry::{apply_homography, containing_cell, in_image};
use imd_core::{cell_center, CameraFrame, FineMatchSet, Mask};
use nalgebra::{Matrix3, Point2};

use crate::coarse::{dual_softmax_tensor, ProbabilityMatrix};
use crate::error::{ModelError, Result};
use crate::ops;

const LOG_FLOOR: f64 = 1e-12;

/// Maps a pixel of image A to image B.
pub trait PointWarp {
    /// `None` when the point has no valid correspondence (invalid depth,
    /// behind the camera, occluded, or mapped to infinity).
    fn warp(&self, x: f64, y: f64) -> Option<(f64, f64)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyWarp(pub Matrix3<f64>);

impl PointWarp for HomographyWarp {
    fn warp(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        apply_homography(&self.0, x, y)
    }
}

/// Depth-and-pose warp with a relative depth consistency check in B.
#[derive(Debug, Clone)]
pub struct PoseWarp<'a> {
    pub frame_a: &'a CameraFrame,
    pub frame_b: &'a CameraFrame,
    pub occlusion_tolerance: f64,
}

impl PointWarp for PoseWarp<'_> {
    fn warp(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let d = self.frame_a.depth.as_ref()?.sample_nearest(x, y)?;
        let world = self.frame_a.unproject(Point2::new(x, y), d)?;
        let (p, z) = self.frame_b.project(&world);
        if z <= 0.0 || !p.x.is_finite() || !p.y.is_finite() {
            return None;
        }
        if let Some(depth_b) = &self.frame_b.depth {
            let db = depth_b.sample_nearest(p.x, p.y)?;
            if (z - db).abs() > self.occlusion_tolerance * db {
                return None;
            }
        }
        Some((p.x, p.y))
    }
}

/// Supervision source of one training pair.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Homography(Matrix3<f64>),
    Posed { a: CameraFrame, b: CameraFrame, occlusion_tolerance: f64 },
    /// Independently moving instances over a background plane.
    Layered { background: Matrix3<f64>, layers: Vec<MotionLayer> },
}

/// One instance: its visible masks in both images and its motion.
#[derive(Debug, Clone)]
pub struct MotionLayer {
    pub mask_a: Mask,
    pub mask_b: Mask,
    pub h: Matrix3<f64>,
}

/// Points on an instance follow its motion and must stay visible on it;
/// background points follow the background and must not be covered.
fn layered_warp(background: &Matrix3<f64>, layers: &[MotionLayer], x: f64, y: f64) -> Option<(f64, f64)> {
    match layers.iter().find(|l| l.mask_a.contains(x, y)) {
        Some(l) => apply_homography(&l.h, x, y).filter(|&(u, v)| l.mask_b.contains(u, v)),
        None => apply_homography(background, x, y).filter(|&(u, v)| !layers.iter().any(|l| l.mask_b.contains(u, v))),
    }
}

impl PointWarp for GroundTruth {
    fn warp(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        match self {
            GroundTruth::Homography(h) => HomographyWarp(*h).warp(x, y),
            GroundTruth::Posed { a, b, occlusion_tolerance } => {
                PoseWarp { frame_a: a, frame_b: b, occlusion_tolerance: *occlusion_tolerance }.warp(x, y)
            }
            GroundTruth::Layered { background, layers } => layered_warp(background, layers, x, y),
        }
    }
}

/// Ground-truth coarse pairs and the exact warped location of each A cell center.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtMatches {
    pub coarse_pairs: Vec<(usize, usize)>,
    pub fine_targets: Vec<(f64, f64)>,
}

impl GtMatches {
    pub fn len(&self) -> usize {
        self.coarse_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coarse_pairs.is_empty()
    }

    /// Target cell in B for coarse cell `idx_a`, if any.
    pub fn target_of(&self, idx_a: usize) -> Option<usize> {
        self.coarse_pairs.iter().find(|p| p.0 == idx_a).map(|p| p.1)
    }
}

/// Warps every coarse cell center of A and keeps those landing inside B.
pub fn warp_cells(warp: &dyn PointWarp, stride: usize, dims_a: (usize, usize), dims_b: (usize, usize)) -> GtMatches {
    let (gwa, gha) = (dims_a.0 / stride, dims_a.1 / stride);
    let (gwb, ghb) = (dims_b.0 / stride, dims_b.1 / stride);
    let mut gt = GtMatches::default();
    for idx in 0..gwa * gha {
        let (x, y) = cell_center(idx, gwa, stride);
        let Some((xb, yb)) = warp.warp(x, y) else { continue };
        if !in_image(xb, yb, dims_b.0, dims_b.1) {
            continue;
        }
        if let Some(idx_b) = containing_cell(xb, yb, gwb, ghb, stride) {
            gt.coarse_pairs.push((idx, idx_b));
            gt.fine_targets.push((xb, yb));
        }
    }
    gt
}

/// Correspondences of A's cell centers through depth and relative pose.
pub fn warp_grid(
    frame_a: &CameraFrame,
    frame_b: &CameraFrame,
    stride: usize,
    dims_b: (usize, usize),
    occlusion_tolerance: f64,
) -> Result<GtMatches> {
    let depth = frame_a
        .depth
        .as_ref()
        .ok_or_else(|| ModelError::Config("depth-based warping needs a depth map for image A".into()))?;
    let warp = PoseWarp { frame_a, frame_b, occlusion_tolerance };
    Ok(warp_cells(&warp, stride, (depth.width, depth.height), dims_b))
}

pub fn warp_homography(
    h: &Matrix3<f64>,
    stride: usize,
    dims_a: (usize, usize),
    dims_b: (usize, usize),
) -> Result<GtMatches> {
    let det = h.determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(ModelError::Config(format!("homography is singular (det = {det:e})")));
    }
    Ok(warp_cells(&HomographyWarp(*h), stride, dims_a, dims_b))
}

/// `-(1/N) sum (1 - p)^gamma ln p` over the gathered probabilities `p [N]`.
pub fn focal_nll(p: &Tensor, gamma: f64) -> Result<Tensor> {
    let n = p.elem_count();
    if n == 0 {
        return Err(ModelError::Supervision("coarse loss needs at least one ground-truth pair".into()));
    }
    let logp = p.maximum(LOG_FLOOR)?.log()?;
    let terms = if gamma == 0.0 {
        logp
    } else {
        let one_minus = (p.ones_like()? - p)?.maximum(0.0)?;
        let weight = if gamma == gamma.round() && gamma <= 4.0 {
            let mut w = one_minus.clone();
            for _ in 1..gamma as usize {
                w = (w * &one_minus)?;
            }
            w
        } else {
            one_minus.maximum(LOG_FLOOR)?.powf(gamma)?
        };
        (weight * logp)?
    };
    Ok((terms.sum_all()? / -(n as f64))?)
}

/// Coarse loss over batched probabilities `[B, La, Lb]` at `(batch, i, j)` triples.
pub fn coarse_loss_batch(p: &Tensor, pairs: &[(usize, usize, usize)], gamma: f64) -> Result<Tensor> {
    let (_, la, lb) = p.dims3()?;
    let idx: Vec<u32> = pairs.iter().map(|&(b, i, j)| (b * la * lb + i * lb + j) as u32).collect();
    let idx = Tensor::from_vec(idx, pairs.len(), p.device())?;
    focal_nll(&p.flatten_all()?.index_select(&idx, 0)?, gamma)
}

/// Coarse loss of one pair.
pub fn coarse_loss(p: &ProbabilityMatrix, gt: &GtMatches, focal_gamma: f64) -> Result<Tensor> {
    let (n, m) = p.dims();
    if let Some(&(i, j)) = gt.coarse_pairs.iter().find(|&&(i, j)| i >= n || j >= m) {
        return Err(ModelError::Supervision(format!("ground-truth pair ({i}, {j}) outside {n}x{m} matrix")));
    }
    let pairs: Vec<_> = gt.coarse_pairs.iter().map(|&(i, j)| (0, i, j)).collect();
    coarse_loss_batch(&p.tensor().unsqueeze(0)?, &pairs, focal_gamma)
}

/// Mean `-ln` of the local dual-softmax at `(matrix, i, k)` targets of scores `[M, n_a, n_b]`.
///
/// Returns a zero loss when there are no targets.
pub fn fine_loss_l1(scores: &Tensor, targets: &[(usize, usize, usize)]) -> Result<Tensor> {
    if targets.is_empty() {
        log::warn!("no fine ground truth inside any window; L_f1 contributes nothing");
        return Ok(Tensor::zeros((), scores.dtype(), scores.device())?);
    }
    let (_, na, nb) = scores.dims3()?;
    let p = dual_softmax_tensor(scores)?;
    let idx: Vec<u32> = targets.iter().map(|&(m, i, k)| (m * na * nb + i * nb + k) as u32).collect();
    let idx = Tensor::from_vec(idx, targets.len(), scores.device())?;
    focal_nll(&p.flatten_all()?.index_select(&idx, 0)?, 0.0)
}

/// Mean squared distance between subpixel predictions `[M, 2]` and targets `[M, 2]`.
pub fn fine_loss_l2_tensor(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dim(0)? == 0 {
        log::warn!("no refined matches paired with ground truth; L_f2 contributes nothing");
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    Ok((pred - target)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Mean squared pixel distance between fine matches and the targets of their
/// coarse parents; `(loss, pairs_used)`.
pub fn fine_loss_l2(mf: &FineMatchSet, gt: &GtMatches) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for m in mf.iter() {
        if let Some(&(x, y)) = gt.fine_targets.get(m.coarse_parent) {
            sum += (m.xb - x).powi(2) + (m.yb - y).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("no fine matches paired with ground truth; L_f2 contributes nothing");
        return (0.0, 0);
    }
    (sum / n as f64, n)
}

pub fn total_loss(lc: f64, lf1: f64, lf2: f64, alpha: f64, beta: f64) -> f64 {
    lc + alpha * lf1 + beta * lf2
}

pub fn total_loss_tensor(lc: &Tensor, lf1: &Tensor, lf2: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    Ok(((lc + (lf1 * alpha)?)? + (lf2 * beta)?)?)
}

/// Softmax-weighted positions from logits `[M, 9]` over fixed positions `[M, 9]`.
pub fn expected_positions(logits: &Tensor, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
    let p = ops::softmax(logits, D::Minus1)?;
    let x = (&p * xs)?.sum_keepdim(D::Minus1)?;
    let y = (&p * ys)?.sum_keepdim(D::Minus1)?;
    Ok(Tensor::cat(&[x, y], 1)?)
}

/// Row-major `[n, 2]` tensor of points.
pub fn points_tensor(points: &[(f64, f64)], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = points.iter().flat_map(|&(x, y)| [x, y]).collect();
    Ok(Tensor::from_vec(flat, (points.len(), 2), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use imd_core::{DepthMap, FineMatch};
    use nalgebra::Vector3;

    fn scalar(t: &Tensor) -> f64 {
        ops::scalar(t).unwrap()
    }

    #[test]
    fn coarse_loss_values() {
        let p = ProbabilityMatrix::from_rows(&[vec![0.5, 0.1], vec![0.2, 1.0]]).unwrap();
        let one = GtMatches { coarse_pairs: vec![(0, 0)], fine_targets: vec![(0.0, 0.0)] };
        assert!((scalar(&coarse_loss(&p, &one, 0.0).unwrap()) - 2f64.ln()).abs() < 1e-12);
        assert!((scalar(&coarse_loss(&p, &one, 2.0).unwrap()) - 0.25 * 2f64.ln()).abs() < 1e-12);
        let perfect = GtMatches { coarse_pairs: vec![(1, 1)], fine_targets: vec![(0.0, 0.0)] };
        assert_eq!(scalar(&coarse_loss(&p, &perfect, 2.0).unwrap()), 0.0);
        assert!(coarse_loss(&p, &GtMatches::default(), 0.0).is_err());
    }

    #[test]
    fn fine_l1_uniform_window() {
        let s = Tensor::zeros((1, 9, 9), DType::F64, &Device::Cpu).unwrap();
        let l = scalar(&fine_loss_l1(&s, &[(0, 4, 4)]).unwrap());
        assert!((l - 2.0 * 9f64.ln()).abs() < 1e-12);
        assert_eq!(scalar(&fine_loss_l1(&s, &[]).unwrap()), 0.0);
    }

    #[test]
    fn fine_l2_unit_offset() {
        let gt = GtMatches { coarse_pairs: vec![(0, 0), (1, 1)], fine_targets: vec![(3.5, 3.5), (11.5, 3.5)] };
        let mk = |parent: usize, x: f64, y: f64| FineMatch {
            xa: 0.0,
            ya: 0.0,
            xb: x,
            yb: y,
            confidence: 1.0,
            coarse_parent: parent,
            low_confidence: false,
        };
        let mf = FineMatchSet::new(vec![mk(0, 4.5, 3.5), mk(1, 12.5, 3.5)], (16, 8), (16, 8)).unwrap();
        assert_eq!(fine_loss_l2(&mf, &gt), (1.0, 2));
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 0.25), 2.25);
    }

    #[test]
    fn homography_translation_shifts_two_columns() {
        let mut h = Matrix3::identity();
        h[(0, 2)] = 16.0;
        let gt = warp_homography(&h, 8, (64, 64), (64, 64)).unwrap();
        assert_eq!(gt.len(), 48);
        for &(a, b) in &gt.coarse_pairs {
            assert_eq!(b, a + 2);
        }
        let singular = Matrix3::zeros();
        assert!(warp_homography(&singular, 8, (64, 64), (64, 64)).is_err());
    }

    #[test]
    fn identity_pose_matches_identity_homography() {
        let k = Matrix3::new(50.0, 0.0, 32.0, 0.0, 50.0, 32.0, 0.0, 0.0, 1.0);
        let fa = CameraFrame::new(k, Matrix3::identity(), Vector3::zeros(), Some(DepthMap::constant(64, 64, 3.0))).unwrap();
        let fb = fa.clone();
        let g1 = warp_grid(&fa, &fb, 8, (64, 64), 0.2).unwrap();
        let g2 = warp_homography(&Matrix3::identity(), 8, (64, 64), (64, 64)).unwrap();
        assert_eq!(g1.coarse_pairs, g2.coarse_pairs);
        for (a, b) in g1.fine_targets.iter().zip(&g2.fine_targets) {
            assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
        }
        let no_depth = CameraFrame::new(k, Matrix3::identity(), Vector3::zeros(), None).unwrap();
        assert!(warp_grid(&no_depth, &fb, 8, (64, 64), 0.2).is_err());
    }
}

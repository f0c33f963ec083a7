//! Fine-level refinement at stride 2.
//!
//! Coarse cell `(c, r)` has its fine-grid center at `(4c + 2, 4r + 2)`, the
//! fine pixel nearest to the coarse cell center. Windows are `w x w` around
//! that center with every position clamped to the map, so border windows
//! repeat edge pixels; their origins are recorded before clamping.

use candle_core::{DType, Tensor};
use imd_core::{CoarseMatchSet, FeatureMap, FineMatch, FineMatchSet, Image, FINE_STRIDE};

use crate::backbone::{feature_map_from_tensor, image_to_tensor};
use crate::coarse::{argmax_lowest, mutual_nearest};
use crate::error::{ModelError, Result};
use crate::layers::{self, Conv2d, ConvSpec};
use crate::params::ParamStore;

/// Fine cells per coarse cell along each axis.
pub const FINE_PER_COARSE: usize = 4;

/// Small residual ConvNet producing stride-2 features.
pub struct FineEncoder {
    conv0: Conv2d,
    conv1: Conv2d,
    res0: Conv2d,
    res1: Conv2d,
}

impl FineEncoder {
    pub fn new(ps: &mut ParamStore, channels: usize) -> Result<Self> {
        let half = (channels / 2).max(1);
        Ok(Self {
            conv0: Conv2d::new(ps, "fine/encoder/conv0", ConvSpec::k3(3, half))?,
            conv1: Conv2d::new(ps, "fine/encoder/conv1", ConvSpec::k3(half, channels).stride(2))?,
            res0: Conv2d::new(ps, "fine/encoder/res0", ConvSpec::k3(channels, channels))?,
            res1: Conv2d::new(ps, "fine/encoder/res1", ConvSpec::k3(channels, channels))?,
        })
    }

    /// `[B, 3, H, W] -> [B, C_f, H/2, W/2]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.conv0.forward(x)?.relu()?;
        let x = self.conv1.forward(&x)?.relu()?;
        let r = self.res1.forward(&self.res0.forward(&x)?.relu()?)?;
        Ok((x + r)?.relu()?)
    }

    pub fn encode(&self, img: &Image, dtype: DType) -> Result<FeatureMap> {
        img.ensure_divisible_by(FINE_STRIDE)?;
        feature_map_from_tensor(&self.forward(&image_to_tensor(img, dtype)?)?, FINE_STRIDE)
    }
}

/// Adds channel-projected, nearest-upsampled coarse features to the fine map.
pub struct Fusion {
    proj: Conv2d,
    conv: Conv2d,
    scale: f64,
}

impl Fusion {
    pub fn new(ps: &mut ParamStore, coarse_channels: usize, fine_channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(ps, "fine/fusion/proj", ConvSpec::k1(coarse_channels, fine_channels).no_bias())?,
            conv: Conv2d::new(ps, "fine/fusion/conv", ConvSpec::k3(fine_channels, fine_channels))?,
            scale: (fine_channels as f64).powf(-0.25),
        })
    }

    /// `fine [B, C_f, 4h, 4w]`, `coarse [B, C, h, w]` -> `[B, C_f, 4h, 4w]`.
    ///
    /// The output is scaled by `C_f^(-1/4)` so pixel dot products are
    /// normalized by `sqrt(C_f)`.
    pub fn forward(&self, fine: &Tensor, coarse: &Tensor) -> Result<Tensor> {
        let (_, _, hf, wf) = fine.dims4()?;
        let (_, _, h, w) = coarse.dims4()?;
        if hf != FINE_PER_COARSE * h || wf != FINE_PER_COARSE * w {
            return Err(ModelError::Shape(format!(
                "fine map {wf}x{hf} is not {FINE_PER_COARSE}x the coarse map {w}x{h}"
            )));
        }
        let up = layers::resize_nearest(&self.proj.forward(coarse)?, hf, wf)?;
        Ok((self.conv.forward(&(fine + up)?)? * self.scale)?)
    }

    pub fn fuse(&self, fine: &FeatureMap, coarse: &FeatureMap, dtype: DType) -> Result<FeatureMap> {
        if fine.stride() != FINE_STRIDE || fine.image_dims() != coarse.image_dims() {
            return Err(ModelError::Shape(format!(
                "fine map covers {:?} at stride {}, coarse map covers {:?}",
                fine.image_dims(),
                fine.stride(),
                coarse.image_dims()
            )));
        }
        let f = crate::backbone::feature_map_to_tensor(fine, dtype)?;
        let c = crate::backbone::feature_map_to_tensor(coarse, dtype)?;
        feature_map_from_tensor(&self.forward(&f, &c)?, FINE_STRIDE)
    }
}

/// Fine-grid center `(x, y)` of flat coarse cell `idx`.
pub fn fine_center(idx: usize, coarse_grid_w: usize) -> (usize, usize) {
    let (c, r) = (idx % coarse_grid_w, idx / coarse_grid_w);
    (FINE_PER_COARSE * c + FINE_PER_COARSE / 2, FINE_PER_COARSE * r + FINE_PER_COARSE / 2)
}

/// A `w x w` window with its unclamped origin and clamped pixel positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub origin: (isize, isize),
    pub size: usize,
    /// Row-major clamped `(x, y)` positions, `size * size` entries.
    pub positions: Vec<(usize, usize)>,
}

impl Window {
    pub fn around(center: (usize, usize), size: usize, dims: (usize, usize)) -> Self {
        let half = (size / 2) as isize;
        let origin = (center.0 as isize - half, center.1 as isize - half);
        let (w, h) = dims;
        let mut positions = Vec::with_capacity(size * size);
        for dy in 0..size as isize {
            for dx in 0..size as isize {
                let x = (origin.0 + dx).clamp(0, w as isize - 1) as usize;
                let y = (origin.1 + dy).clamp(0, h as isize - 1) as usize;
                positions.push((x, y));
            }
        }
        Self { origin, size, positions }
    }

    /// Window slot holding the fine pixel `(x, y)`, counted before clamping.
    pub fn slot_of(&self, x: isize, y: isize) -> Option<usize> {
        let (dx, dy) = (x - self.origin.0, y - self.origin.1);
        let s = self.size as isize;
        if dx < 0 || dy < 0 || dx >= s || dy >= s {
            return None;
        }
        let k = (dy * s + dx) as usize;
        (self.positions[k] == (x as usize, y as usize)).then_some(k)
    }

    /// Flat indices into an `[h * w]` map.
    pub fn flat_indices(&self, map_w: usize) -> Vec<u32> {
        self.positions.iter().map(|&(x, y)| (y * map_w + x) as u32).collect()
    }
}

/// Pixel vectors of a window, row-major, `[w*w][C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub channels: usize,
    pub window: Window,
    pub data: Vec<f32>,
}

impl Patch {
    pub fn extract(map: &FeatureMap, window: Window) -> Self {
        let c = map.channels();
        let mut data = Vec::with_capacity(window.positions.len() * c);
        for &(x, y) in &window.positions {
            data.extend(map.vector(x, y));
        }
        Self { channels: c, window, data }
    }

    pub fn len(&self) -> usize {
        self.window.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.positions.is_empty()
    }

    pub fn pixel(&self, k: usize) -> &[f32] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub patch_a: Patch,
    pub patch_b: Patch,
    /// Position of the parent in the coarse match set.
    pub coarse_parent: usize,
}

/// Crops one window pair per coarse match.
pub fn crop_patches(fa: &FeatureMap, fb: &FeatureMap, matches: &CoarseMatchSet, size: usize) -> Result<Vec<PatchPair>> {
    if size < 3 || size % 2 == 0 {
        return Err(ModelError::Config(format!("fine window must be odd and >= 3, got {size}")));
    }
    let gwa = fa.width() / FINE_PER_COARSE;
    let gwb = fb.width() / FINE_PER_COARSE;
    Ok(matches
        .iter()
        .enumerate()
        .map(|(k, m)| PatchPair {
            patch_a: Patch::extract(fa, Window::around(fine_center(m.idx_a, gwa), size, (fa.width(), fa.height()))),
            patch_b: Patch::extract(fb, Window::around(fine_center(m.idx_b, gwb), size, (fb.width(), fb.height()))),
            coarse_parent: k,
        })
        .collect())
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// `S_l[i, j] = <pa_i, pb_j> / theta`, row-major `[n_a * n_b]`.
pub fn local_scores(pp: &PatchPair, temperature: f64) -> Vec<f64> {
    let (na, nb) = (pp.patch_a.len(), pp.patch_b.len());
    let mut s = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            s.push(dot(pp.patch_a.pixel(i), pp.patch_b.pixel(j)) / temperature);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMatch {
    pub slot_a: usize,
    pub slot_b: usize,
    pub score: f64,
    pub low_confidence: bool,
}

/// Best mutual-nearest pair of a local score matrix by raw score, or the global
/// argmax flagged low-confidence when no mutual pair exists.
pub fn select_local(scores: &[f64], n_a: usize, n_b: usize) -> LocalMatch {
    let mnn = mutual_nearest(scores, n_a, n_b);
    let best = argmax_lowest(mnn.iter().map(|&(i, j)| scores[i * n_b + j])).map(|k| mnn[k]);
    match best {
        Some((i, j)) => LocalMatch { slot_a: i, slot_b: j, score: scores[i * n_b + j], low_confidence: false },
        None => {
            let k = argmax_lowest(scores.iter().copied()).expect("non-empty local score matrix");
            LocalMatch { slot_a: k / n_b, slot_b: k % n_b, score: scores[k], low_confidence: true }
        }
    }
}

pub fn local_match(pp: &PatchPair, temperature: f64) -> (LocalMatch, Vec<f64>) {
    let s = local_scores(pp, temperature);
    (select_local(&s, pp.patch_a.len(), pp.patch_b.len()), s)
}

/// Offsets `(dx, dy)` of the 3x3 neighbourhood, row-major.
pub const NEIGHBOUR_OFFSETS: [(isize, isize); 9] =
    [(-1, -1), (0, -1), (1, -1), (-1, 0), (0, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Softmax-weighted mean of the 3x3 offsets for nine logits.
pub fn expectation_offset(logits: &[f64; 9]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut off = (0.0, 0.0);
    for (p, (dx, dy)) in e.iter().zip(NEIGHBOUR_OFFSETS) {
        off.0 += p / z * dx as f64;
        off.1 += p / z * dy as f64;
    }
    off
}

/// Fine-grid position to original-image pixels.
pub fn fine_to_pixel(x: f64, y: f64) -> (f64, f64) {
    let s = FINE_STRIDE as f64;
    (s * x + 0.5 * s - 0.5, s * y + 0.5 * s - 0.5)
}

/// Subpixel location in B of query `qa`, from the 3x3 neighbourhood around `center_b`.
///
/// Neighbours are clamped to the map; the result is the softmax-weighted mean
/// of the clamped positions, in original-image pixels.
pub fn subpixel_expectation(qa: &[f32], fb: &FeatureMap, center_b: (usize, usize), temperature: f64) -> (f64, f64) {
    let (w, h) = (fb.width() as isize, fb.height() as isize);
    let mut logits = [0f64; 9];
    let mut pos = [(0f64, 0f64); 9];
    for (k, (dx, dy)) in NEIGHBOUR_OFFSETS.iter().enumerate() {
        let x = (center_b.0 as isize + dx).clamp(0, w - 1) as usize;
        let y = (center_b.1 as isize + dy).clamp(0, h - 1) as usize;
        logits[k] = dot(qa, &fb.vector(x, y)) / temperature;
        pos[k] = (x as f64, y as f64);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let (mut x, mut y) = (0.0, 0.0);
    for (p, (px, py)) in e.iter().zip(pos) {
        x += p / z * px;
        y += p / z * py;
    }
    fine_to_pixel(x, y)
}

/// Refines every coarse match to one subpixel match on the fused fine maps.
pub fn refine(
    fa: &FeatureMap,
    fb: &FeatureMap,
    matches: &CoarseMatchSet,
    window: usize,
    temperature: f64,
) -> Result<FineMatchSet> {
    let pairs = crop_patches(fa, fb, matches, window)?;
    let mut out = Vec::with_capacity(pairs.len());
    for pp in &pairs {
        let (lm, _) = local_match(pp, temperature);
        let (xa, ya) = pp.patch_a.window.positions[lm.slot_a];
        let center_b = pp.patch_b.window.positions[lm.slot_b];
        let (pxa, pya) = fine_to_pixel(xa as f64, ya as f64);
        let (pxb, pyb) = subpixel_expectation(pp.patch_a.pixel(lm.slot_a), fb, center_b, temperature);
        out.push(FineMatch {
            xa: pxa,
            ya: pya,
            xb: pxb,
            yb: pyb,
            confidence: matches.entries()[pp.coarse_parent].confidence,
            coarse_parent: pp.coarse_parent,
            low_confidence: lm.low_confidence,
        });
    }
    let (wa, ha) = fa.image_dims();
    let (wb, hb) = fb.image_dims();
    Ok(FineMatchSet::new(out, (wa, ha), (wb, hb))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use imd_core::CoarseMatch;

    fn map(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        FeatureMap::new(c, h, w, FINE_STRIDE, data).unwrap()
    }

    #[test]
    fn window_centering_and_clamping() {
        let w = Window::around((10, 10), 5, (32, 32));
        assert_eq!(w.origin, (8, 8));
        assert_eq!(w.positions[0], (8, 8));
        assert_eq!(w.positions[24], (12, 12));
        let corner = Window::around((0, 0), 5, (32, 32));
        assert_eq!(corner.origin, (-2, -2));
        assert_eq!(corner.positions.len(), 25);
        assert_eq!(corner.positions[0], (0, 0));
        assert_eq!(corner.slot_of(0, 0), Some(12));
        assert_eq!(corner.slot_of(-1, 0), None);
    }

    #[test]
    fn fine_center_is_nearest_fine_pixel() {
        assert_eq!(fine_center(0, 8), (2, 2));
        assert_eq!(fine_center(9, 8), (6, 6));
        let (x, _) = fine_to_pixel(2.0, 2.0);
        assert!((x - 4.5).abs() < 1e-12);
    }

    #[test]
    fn expectation_uniform_and_one_hot() {
        assert_eq!(expectation_offset(&[0.3; 9]), (0.0, 0.0));
        let mut l = [0.0; 9];
        l[0] = 1e4;
        let (dx, dy) = expectation_offset(&l);
        assert!((dx + 1.0).abs() < 1e-12 && (dy + 1.0).abs() < 1e-12);
    }

    #[test]
    fn local_ties_take_lowest_index() {
        let m = select_local(&[0.0; 9 * 9], 9, 9);
        assert_eq!((m.slot_a, m.slot_b), (0, 0));
    }

    #[test]
    fn self_refinement_maps_points_to_themselves() {
        let f = map(6, 32, 32, |c, y, x| ((c * 31 + y * 7 + x * 13) as f32 * 0.37).sin());
        let matches: Vec<CoarseMatch> =
            (0..64).map(|i| CoarseMatch { idx_a: i, idx_b: i, confidence: 1.0 }).collect();
        let set = CoarseMatchSet::new(matches, 64, 64).unwrap();
        let fine = refine(&f, &f, &set, 5, 0.1).unwrap();
        assert_eq!(fine.len(), 64);
        for m in fine.iter() {
            assert!((m.xa - m.xb).abs() < 0.5 && (m.ya - m.yb).abs() < 0.5, "{m:?}");
        }
    }
}

//! Batched training with AdamW on the three-term loss.

use std::path::PathBuf;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use imd_core::geometry::in_image;
use imd_core::{cell_center, CoarseMatchSet, Image, COARSE_STRIDE};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::image_to_tensor;
use crate::error::{ModelError, Result};
use crate::fine::{fine_center, fine_to_pixel, Window, FINE_PER_COARSE, NEIGHBOUR_OFFSETS};
use crate::model::{ImdModel, RunOptions};
use crate::ops;
use crate::supervision::{
    coarse_loss_batch, expected_positions, fine_loss_l1, fine_loss_l2_tensor, points_tensor, total_loss_tensor,
    warp_cells, GroundTruth, PointWarp,
};

/// One supervised image pair.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_a: Image,
    pub image_b: Image,
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub coarse: f64,
    pub fine_l1: f64,
    pub fine_l2: f64,
    pub total: f64,
}

pub struct LossTerms {
    pub coarse: Tensor,
    pub fine_l1: Tensor,
    pub fine_l2: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            coarse: ops::scalar(&self.coarse)?,
            fine_l1: ops::scalar(&self.fine_l1)?,
            fine_l2: ops::scalar(&self.fine_l2)?,
            total: ops::scalar(&self.total)?,
        })
    }
}

fn stack_images(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let ts: Vec<Tensor> = images.iter().map(|i| image_to_tensor(i, dtype)).collect::<Result<_>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

fn pixel_to_fine(px: f64) -> f64 {
    (px - 0.5) / 2.0
}

/// Supervision indices gathered for one batch.
#[derive(Default)]
struct FineGather {
    window_a: Vec<u32>,
    window_b: Vec<u32>,
    l1_targets: Vec<(usize, usize, usize)>,
    query: Vec<u32>,
    neighbours: Vec<u32>,
    neighbour_x: Vec<f64>,
    neighbour_y: Vec<f64>,
    query_targets: Vec<(f64, f64)>,
}

/// Computes the three loss terms for a batch of same-sized pairs.
pub fn batch_losses(model: &ImdModel, batch: &[&TrainSample], opts: &RunOptions, rng: &mut ChaCha8Rng) -> Result<LossTerms> {
    let m = &opts.matching;
    let dtype = model.dtype();
    let (w, h) = batch[0].image_a.dims();
    if batch.iter().any(|s| s.image_a.dims() != (w, h) || s.image_b.dims() != (w, h)) {
        return Err(ModelError::Shape("training batch mixes image sizes".into()));
    }
    let a = stack_images(&batch.iter().map(|s| &s.image_a).collect::<Vec<_>>(), dtype)?;
    let b = stack_images(&batch.iter().map(|s| &s.image_b).collect::<Vec<_>>(), dtype)?;
    let out = model.forward(&a, &b, opts, rng)?;

    let (gw, gh) = (w / COARSE_STRIDE, h / COARSE_STRIDE);
    let (fw, fh) = (gw * FINE_PER_COARSE, gh * FINE_PER_COARSE);
    let plane = fw * fh;
    let size = m.fine_window;
    let mut coarse_pairs = Vec::new();
    let mut g = FineGather::default();
    let mut window_count = 0;
    for (bi, s) in batch.iter().enumerate() {
        let gt = warp_cells(&s.gt, COARSE_STRIDE, (w, h), (w, h));
        for &(ia, ib) in &gt.coarse_pairs {
            coarse_pairs.push((bi, ia, ib));
            let wa = Window::around(fine_center(ia, gw), size, (fw, fh));
            let wb = Window::around(fine_center(ib, gw), size, (fw, fh));
            let base = (bi * plane) as u32;
            g.window_a.extend(wa.flat_indices(fw).into_iter().map(|i| i + base));
            g.window_b.extend(wb.flat_indices(fw).into_iter().map(|i| i + base));
            for (slot, &(x, y)) in wa.positions.iter().enumerate() {
                if wa.slot_of(x as isize, y as isize) != Some(slot) {
                    continue;
                }
                let (px, py) = fine_to_pixel(x as f64, y as f64);
                let Some((qx, qy)) = s.gt.warp(px, py) else { continue };
                if !in_image(qx, qy, w, h) {
                    continue;
                }
                let (jx, jy) = (pixel_to_fine(qx).round() as isize, pixel_to_fine(qy).round() as isize);
                if let Some(k) = wb.slot_of(jx, jy) {
                    g.l1_targets.push((window_count, slot, k));
                }
            }
            window_count += 1;

            let (cx, cy) = fine_center(ia, gw);
            let (px, py) = fine_to_pixel(cx as f64, cy as f64);
            if let Some((qx, qy)) = s.gt.warp(px, py).filter(|&(x, y)| in_image(x, y, w, h)) {
                let jx = (pixel_to_fine(qx).round() as isize).clamp(0, fw as isize - 1);
                let jy = (pixel_to_fine(qy).round() as isize).clamp(0, fh as isize - 1);
                g.query.push(base + (cy * fw + cx) as u32);
                for (dx, dy) in NEIGHBOUR_OFFSETS {
                    let nx = (jx + dx).clamp(0, fw as isize - 1) as usize;
                    let ny = (jy + dy).clamp(0, fh as isize - 1) as usize;
                    g.neighbours.push(base + (ny * fw + nx) as u32);
                    let (ppx, ppy) = fine_to_pixel(nx as f64, ny as f64);
                    g.neighbour_x.push(ppx);
                    g.neighbour_y.push(ppy);
                }
                g.query_targets.push((qx, qy));
            }
        }
    }
    if coarse_pairs.is_empty() {
        return Err(ModelError::Supervision("batch has no ground-truth correspondences".into()));
    }
    let coarse = coarse_loss_batch(&out.prob, &coarse_pairs, m.focal_gamma)?;

    let c = out.fine_a.dim(1)?;
    let flat = |t: &Tensor| -> Result<Tensor> { Ok(t.permute((0, 2, 3, 1))?.contiguous()?.reshape(((), c))?) };
    let fa = flat(&out.fine_a)?;
    let fb = flat(&out.fine_b)?;
    let dev = fa.device().clone();
    let idx = |v: Vec<u32>| -> Result<Tensor> { Ok(Tensor::from_vec(v.clone(), v.len(), &dev)?) };
    let n2 = size * size;
    let pa = fa.index_select(&idx(g.window_a)?, 0)?.reshape((window_count, n2, c))?;
    let pb = fb.index_select(&idx(g.window_b)?, 0)?.reshape((window_count, n2, c))?;
    let scores = (pa.matmul(&pb.t()?)? / m.fine_temperature)?;
    let fine_l1 = fine_loss_l1(&scores, &g.l1_targets)?;

    let nq = g.query.len();
    let fine_l2 = if nq == 0 {
        fine_loss_l2_tensor(&Tensor::zeros((0, 2), dtype, &dev)?, &Tensor::zeros((0, 2), dtype, &dev)?)?
    } else {
        let q = fa.index_select(&idx(g.query)?, 0)?.unsqueeze(2)?;
        let nb = fb.index_select(&idx(g.neighbours)?, 0)?.reshape((nq, 9, c))?;
        let logits = (nb.matmul(&q)?.squeeze(D::Minus1)? / m.fine_temperature)?;
        let xs = Tensor::from_vec(g.neighbour_x, (nq, 9), &dev)?.to_dtype(dtype)?;
        let ys = Tensor::from_vec(g.neighbour_y, (nq, 9), &dev)?.to_dtype(dtype)?;
        let pred = expected_positions(&logits, &xs, &ys)?;
        fine_loss_l2_tensor(&pred, &points_tensor(&g.query_targets, dtype)?)?
    };
    let total = total_loss_tensor(&coarse, &fine_l1, &fine_l2, m.alpha, m.beta)?;
    Ok(LossTerms { coarse, fine_l1, fine_l2, total })
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch: 4,
            weight_decay: 1e-4,
            checkpoint_every: None,
            checkpoint_dir: None,
            log_every: 100,
        }
    }
}

pub struct Trainer<'m> {
    model: &'m ImdModel,
    opts: RunOptions,
    train: TrainOptions,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m ImdModel, opts: RunOptions, train: TrainOptions) -> Result<Self> {
        if train.batch == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        let params = ParamsAdamW { lr: train.lr, weight_decay: train.weight_decay, ..ParamsAdamW::default() };
        let optimizer = AdamW::new(model.params().trainable_vars(), params)?;
        let rng = ChaCha8Rng::seed_from_u64(opts.matching.seed);
        Ok(Self { model, opts, train, optimizer, rng, step: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One optimizer step on the given batch.
    pub fn step(&mut self, batch: &[&TrainSample]) -> Result<LossValues> {
        let losses = batch_losses(self.model, batch, &self.opts, &mut self.rng)?;
        let values = losses.values()?;
        if !values.total.is_finite() {
            return Err(ModelError::Supervision(format!("non-finite loss at step {}", self.step)));
        }
        self.optimizer.backward_step(&losses.total)?;
        self.step += 1;
        Ok(values)
    }

    /// Trains for the configured number of steps on random batches of `data`.
    pub fn run(&mut self, data: &[TrainSample], mut on_step: impl FnMut(usize, &LossValues)) -> Result<LossValues> {
        if data.is_empty() {
            return Err(ModelError::Supervision("empty training set".into()));
        }
        let bs = self.train.batch.min(data.len());
        let mut last = None;
        while self.step < self.train.steps {
            let picks = sample(&mut self.rng, data.len(), bs);
            let batch: Vec<&TrainSample> = picks.iter().map(|i| &data[i]).collect();
            let v = self.step(&batch)?;
            on_step(self.step, &v);
            if self.train.log_every > 0 && self.step % self.train.log_every == 0 {
                log::info!(
                    "step {} loss {:.4} (coarse {:.4}, f1 {:.4}, f2 {:.4})",
                    self.step,
                    v.total,
                    v.coarse,
                    v.fine_l1,
                    v.fine_l2
                );
            }
            if let (Some(every), Some(dir)) = (self.train.checkpoint_every, &self.train.checkpoint_dir) {
                if every > 0 && self.step % every == 0 {
                    self.model.save(&dir.join(format!("step-{:06}", self.step)))?;
                }
            }
            last = Some(v);
        }
        last.ok_or_else(|| ModelError::Config("no training steps requested".into()))
    }
}

/// Fraction of coarse matches whose B cell is within one cell (Chebyshev) of
/// the ground-truth cell; `None` when no match has a ground truth.
pub fn coarse_precision(
    matches: &CoarseMatchSet,
    gt: &dyn PointWarp,
    grid_a: (usize, usize),
    grid_b: (usize, usize),
) -> Option<(usize, usize)> {
    let dims_b = (grid_b.0 * COARSE_STRIDE, grid_b.1 * COARSE_STRIDE);
    let mut good = 0;
    let mut total = 0;
    for m in matches.iter() {
        let (x, y) = cell_center(m.idx_a, grid_a.0, COARSE_STRIDE);
        let Some((xb, yb)) = gt.warp(x, y).filter(|&(x, y)| in_image(x, y, dims_b.0, dims_b.1)) else {
            continue;
        };
        let col = ((xb + 0.5) / COARSE_STRIDE as f64).floor() as isize;
        let row = ((yb + 0.5) / COARSE_STRIDE as f64).floor() as isize;
        let (mc, mr) = ((m.idx_b % grid_b.0) as isize, (m.idx_b / grid_b.0) as isize);
        total += 1;
        if (col - mc).abs() <= 1 && (row - mr).abs() <= 1 {
            good += 1;
        }
    }
    (total > 0).then_some((good, total))
}

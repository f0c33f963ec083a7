//! Coarse matching: attention transform, cosine scores, dual-softmax and
//! mutual-nearest-neighbour selection.

use candle_core::{DType, Device, Tensor, D};
use imd_core::{CoarseMatch, CoarseMatchSet, FeatureMap};

use crate::backbone::{feature_map_from_tensor, feature_map_to_tensor};

use crate::error::{ModelError, Result};
use crate::layers::{self, LayerNorm, Linear};
use crate::ops;
use crate::params::ParamStore;

const NORM_FLOOR: f64 = 1e-8;

/// Fixed 2-D sinusoidal positional encoding, `[1, C, h, w]`.
///
/// A quarter of the channels each carry `sin(x f)`, `cos(x f)`, `sin(y f)`
/// and `cos(y f)` for geometrically spaced frequencies `f`.
pub fn positional_encoding(channels: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    if channels % 4 != 0 {
        return Err(ModelError::Shape(format!("positional encoding needs channels divisible by 4, got {channels}")));
    }
    let q = channels / 4;
    let mut data = vec![0f64; channels * h * w];
    for k in 0..q {
        let freq = 1.0 / 10000f64.powf(k as f64 / q as f64);
        for y in 0..h {
            for x in 0..w {
                let at = |c: usize| c * h * w + y * w + x;
                data[at(k)] = (x as f64 * freq).sin();
                data[at(q + k)] = (x as f64 * freq).cos();
                data[at(2 * q + k)] = (y as f64 * freq).sin();
                data[at(3 * q + k)] = (y as f64 * freq).cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, channels, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Pre-norm attention layer followed by a feed-forward block.
struct AttnLayer {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ffn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl AttnLayer {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}/norm"), c)?,
            q: Linear::new(ps, &format!("{name}/q"), c, c, false)?,
            k: Linear::new(ps, &format!("{name}/k"), c, c, false)?,
            v: Linear::new(ps, &format!("{name}/v"), c, c, false)?,
            out: Linear::new(ps, &format!("{name}/out"), c, c, true)?,
            ffn_norm: LayerNorm::new(ps, &format!("{name}/ffn_norm"), c)?,
            ffn_in: Linear::new(ps, &format!("{name}/ffn_in"), c, 2 * c, true)?,
            ffn_out: Linear::new(ps, &format!("{name}/ffn_out"), 2 * c, c, true)?,
        })
    }

    /// `x [B, L, C]` attends to `source [B, L', C]`.
    fn forward(&self, x: &Tensor, source: &Tensor) -> Result<Tensor> {
        let xn = self.norm.forward(x)?;
        let sn = self.norm.forward(source)?;
        let msg = layers::attention(&self.q.forward(&xn)?, &self.k.forward(&sn)?, &self.v.forward(&sn)?)?;
        let x = (x + self.out.forward(&msg)?)?;
        let ff = self.ffn_out.forward(&self.ffn_in.forward(&self.ffn_norm.forward(&x)?)?.gelu()?)?;
        Ok((x + ff)?)
    }
}

/// Interleaved self/cross attention with weights shared across rounds.
pub struct CoarseTransformer {
    channels: usize,
    rounds: usize,
    self_attn: AttnLayer,
    cross_attn: AttnLayer,
}

impl CoarseTransformer {
    pub fn new(ps: &mut ParamStore, channels: usize, rounds: usize) -> Result<Self> {
        Ok(Self {
            channels,
            rounds,
            self_attn: AttnLayer::new(ps, "coarse/self", channels)?,
            cross_attn: AttnLayer::new(ps, "coarse/cross", channels)?,
        })
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// `ca [B, C, ha, wa]`, `cb [B, C, hb, wb]` -> token sequences `[B, ha*wa, C]`, `[B, hb*wb, C]`.
    pub fn forward_tokens(&self, ca: &Tensor, cb: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_tokens_rounds(ca, cb, self.rounds)
    }

    pub fn forward_tokens_rounds(&self, ca: &Tensor, cb: &Tensor, rounds: usize) -> Result<(Tensor, Tensor)> {
        let (_, c_a, ha, wa) = ca.dims4()?;
        let (_, c_b, hb, wb) = cb.dims4()?;
        if c_a != c_b || c_a != self.channels {
            return Err(ModelError::Shape(format!(
                "coarse channels {c_a} / {c_b} do not match transformer width {}",
                self.channels
            )));
        }
        let pa = positional_encoding(c_a, ha, wa, ca.dtype())?;
        let pb = positional_encoding(c_b, hb, wb, cb.dtype())?;
        let mut a = layers::to_tokens(&ca.broadcast_add(&pa)?)?;
        let mut b = layers::to_tokens(&cb.broadcast_add(&pb)?)?;
        for _ in 0..rounds {
            a = self.self_attn.forward(&a, &a)?;
            b = self.self_attn.forward(&b, &b)?;
            let a_next = self.cross_attn.forward(&a, &b)?;
            let b_next = self.cross_attn.forward(&b, &a)?;
            a = a_next;
            b = b_next;
        }
        Ok((a, b))
    }

    /// Single-pair transform of stride-8 feature maps with `n_attn` rounds.
    pub fn transform_features(
        &self,
        ca: &FeatureMap,
        cb: &FeatureMap,
        n_attn: usize,
        dtype: DType,
    ) -> Result<(FeatureMap, FeatureMap)> {
        let ta = feature_map_to_tensor(ca, dtype)?;
        let tb = feature_map_to_tensor(cb, dtype)?;
        let (a, b) = self.forward_tokens_rounds(&ta, &tb, n_attn)?;
        let a = layers::from_tokens(&a, ca.height(), ca.width())?;
        let b = layers::from_tokens(&b, cb.height(), cb.width())?;
        Ok((feature_map_from_tensor(&a, ca.stride())?, feature_map_from_tensor(&b, cb.stride())?))
    }

    /// Same as [`CoarseTransformer::forward_tokens`] with outputs reshaped to the input grids.
    pub fn forward(&self, ca: &Tensor, cb: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, ha, wa) = ca.dims4()?;
        let (_, _, hb, wb) = cb.dims4()?;
        let (a, b) = self.forward_tokens(ca, cb)?;
        Ok((layers::from_tokens(&a, ha, wa)?, layers::from_tokens(&b, hb, wb)?))
    }
}

/// Cosine similarity divided by `temperature`: `[B, La, C] x [B, Lb, C] -> [B, La, Lb]`.
pub fn score_tensor(a: &Tensor, b: &Tensor, temperature: f64) -> Result<Tensor> {
    let norm = |t: &Tensor| -> Result<Tensor> {
        let n = t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(NORM_FLOOR)?;
        Ok(t.broadcast_div(&n)?)
    };
    let s = norm(a)?.matmul(&norm(b)?.t()?)?;
    Ok((s / temperature)?)
}

/// Row softmax times column softmax of `[..., La, Lb]`.
pub fn dual_softmax_tensor(s: &Tensor) -> Result<Tensor> {
    let rank = s.rank();
    let rows = ops::softmax(s, D::Minus1)?;
    let cols = ops::softmax(s, D::Minus2)?;
    debug_assert!(rank >= 2);
    Ok((rows * cols)?)
}

/// Temperature-scaled cosine scores of one pair, `[La, Lb]`.
#[derive(Debug, Clone)]
pub struct ScoreMatrix(Tensor);

/// Dual-softmax probabilities of one pair, `[La, Lb]`.
#[derive(Debug, Clone)]
pub struct ProbabilityMatrix(Tensor);

fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(ModelError::Shape("ragged matrix rows".into()));
    }
    Ok(Tensor::from_vec(rows.concat(), (n, m), &Device::Cpu)?)
}

impl ScoreMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2()?;
        Ok(Self(t))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_tensor(rows)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.0.to_dtype(DType::F64)?.to_vec2()?)
    }
}

impl ProbabilityMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2()?;
        Ok(Self(t))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_tensor(rows)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        let d = self.0.dims();
        (d[0], d[1])
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.0.to_dtype(DType::F64)?.to_vec2()?)
    }
}

/// Cosine score matrix between two transformed coarse maps `[C, h, w]` or `[1, C, h, w]`.
pub fn score_matrix(ca: &Tensor, cb: &Tensor, temperature: f64) -> Result<ScoreMatrix> {
    let tok = |t: &Tensor| -> Result<Tensor> {
        let t = if t.rank() == 3 { t.unsqueeze(0)? } else { t.clone() };
        layers::to_tokens(&t)
    };
    ScoreMatrix::new(score_tensor(&tok(ca)?, &tok(cb)?, temperature)?.squeeze(0)?)
}

pub fn dual_softmax(s: &ScoreMatrix) -> Result<ProbabilityMatrix> {
    ProbabilityMatrix::new(dual_softmax_tensor(&s.0)?)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<I: IntoIterator<Item = f64>>(values: I) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Mutual-nearest-neighbour pairs of a row-major `n x m` matrix, in row order.
pub fn mutual_nearest(data: &[f64], n: usize, m: usize) -> Vec<(usize, usize)> {
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let row_best: Vec<usize> = (0..n)
        .map(|i| argmax_lowest(data[i * m..(i + 1) * m].iter().copied()).unwrap())
        .collect();
    let col_best: Vec<usize> = (0..m).map(|j| argmax_lowest((0..n).map(|i| data[i * m + j])).unwrap()).collect();
    (0..n).filter(|&i| col_best[row_best[i]] == i).map(|i| (i, row_best[i])).collect()
}

/// Keeps `(i, j)` when `P[i, j] > tau` and the pair is a mutual nearest neighbour.
pub fn select_matches(p: &ProbabilityMatrix, tau: f64) -> Result<CoarseMatchSet> {
    let (n, m) = p.dims();
    let data: Vec<f64> = p.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let entries = mutual_nearest(&data, n, m)
        .into_iter()
        .filter(|&(i, j)| data[i * m + j] > tau)
        .map(|(i, j)| CoarseMatch { idx_a: i, idx_b: j, confidence: data[i * m + j].clamp(0.0, 1.0) as f32 })
        .collect();
    Ok(CoarseMatchSet::new(entries, n, m)?)
}

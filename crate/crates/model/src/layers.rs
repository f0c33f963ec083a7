//! Small building blocks shared by the backbone, prompt module and matcher.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::ops;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = ps.param(&format!("{name}/weight"), &[d_out, d_in], Init::FanIn(d_in))?;
        let bias = if bias { Some(ps.param(&format!("{name}/bias"), &[d_out], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    /// `x [..., d_in] -> [..., d_out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn k3(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out, kernel: 3, stride: 1, bias: true }
    }

    pub fn k1(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out, kernel: 1, stride: 1, bias: true }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        Self::build(ps, name, spec, true)
    }

    pub fn frozen(ps: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        Self::build(ps, name, spec, false)
    }

    fn build(ps: &mut ParamStore, name: &str, spec: ConvSpec, trainable: bool) -> Result<Self> {
        let fan_in = spec.c_in * spec.kernel * spec.kernel;
        let shape = [spec.c_out, spec.c_in, spec.kernel, spec.kernel];
        let wname = format!("{name}/weight");
        let bname = format!("{name}/bias");
        let (weight, bias) = if trainable {
            let w = ps.param(&wname, &shape, Init::FanIn(fan_in))?;
            let b = if spec.bias { Some(ps.param(&bname, &[spec.c_out], Init::Zeros)?) } else { None };
            (w, b)
        } else {
            // Frozen random encoders keep activations at unit scale.
            let w = ps.frozen(&wname, &shape, Init::Normal((2.0 / fan_in as f64).sqrt()))?;
            let b = if spec.bias { Some(ps.frozen(&bname, &[spec.c_out], Init::Normal(0.1))?) } else { None };
            (w, b)
        };
        Ok(Self { weight, bias, stride: spec.stride, pad: spec.kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        assert!(channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        let gamma = ps.param(&format!("{name}/gamma"), &[channels], Init::Ones)?;
        let beta = ps.param(&format!("{name}/beta"), &[channels], Init::Zeros)?;
        Ok(Self { groups, gamma, beta })
    }

    /// `x [B, C, H, W]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = ps.param(&format!("{name}/gamma"), &[dim], Init::Ones)?;
        let beta = ps.param(&format!("{name}/beta"), &[dim], Init::Zeros)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Single-head scaled dot-product attention.
///
/// `q [B, Lq, d]`, `k [B, Lk, d]`, `v [B, Lk, dv]` -> `[B, Lq, dv]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)? as f64;
    let logits = (q.matmul(&k.t()?)? / d.sqrt())?;
    Ok(ops::softmax(&logits, D::Minus1)?.matmul(v)?)
}

/// `[B, C, H, W] -> [B, H*W, C]`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, H*W, C] -> [B, C, H, W]`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Nearest-neighbour resize of `[B, C, H, W]` to `(out_h, out_w)`.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows: Vec<u32> = (0..out_h).map(|i| ((i * h) / out_h) as u32).collect();
    let cols: Vec<u32> = (0..out_w).map(|i| ((i * w) / out_w) as u32).collect();
    let x = x.index_select(&Tensor::new(rows.as_slice(), dev)?, 2)?;
    Ok(x.index_select(&Tensor::new(cols.as_slice(), dev)?, 3)?)
}

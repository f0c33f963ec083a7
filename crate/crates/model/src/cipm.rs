//! Cross-image interaction prompts.
//!
//! Each image is encoded to a patch grid by a frozen encoder. A prompt for
//! image A is built by letting A's patches attend to B's (queries from A,
//! keys and values from B) and mapping the attended vectors through an MLP;
//! B's prompt mirrors this. The alternative modes used for ablations replace
//! the partner by the image itself, concatenate both grids, or zero the prompt.

use candle_core::{DType, Tensor};
use imd_core::Image;

use crate::backbone::{image_to_tensor, PromptEmbedding};
use crate::config::{CipmSpec, PromptMode};
use crate::error::{ModelError, Result};
use crate::layers::{self, Conv2d, ConvSpec, Linear};
use crate::params::ParamStore;

/// Patch-grid features `[d_e, g, g]` of one image.
#[derive(Debug, Clone)]
pub struct EncoderGrid {
    tensor: Tensor,
}

impl EncoderGrid {
    /// From `[d_e, g, g]` or `[1, d_e, g, g]`.
    pub fn new(t: Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t };
        let (_, g, g2) = t.dims3()?;
        if g != g2 {
            return Err(ModelError::Shape(format!("encoder grid must be square, got {g}x{g2}")));
        }
        Ok(Self { tensor: t })
    }

    pub fn dim(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn grid(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.tensor.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Frozen convolutional image encoder producing a `g x g` grid.
pub struct ImageEncoder {
    grid: usize,
    conv0: Conv2d,
    conv1: Conv2d,
}

impl ImageEncoder {
    pub fn new(ps: &mut ParamStore, spec: &CipmSpec) -> Result<Self> {
        Ok(Self {
            grid: spec.grid,
            conv0: Conv2d::frozen(ps, "cipm/encoder/conv0", ConvSpec::k3(3, 16).stride(2))?,
            conv1: Conv2d::frozen(ps, "cipm/encoder/conv1", ConvSpec::k3(16, spec.encoder_dim).stride(2))?,
        })
    }

    /// `[B, 3, H, W] -> [B, d_e, g, g]`; the input is first resized to `4g x 4g`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let side = 4 * self.grid;
        let x = layers::resize_nearest(x, side, side)?;
        let x = self.conv0.forward(&x)?.silu()?;
        self.conv1.forward(&x)
    }

    pub fn encode(&self, img: &Image, dtype: DType) -> Result<EncoderGrid> {
        EncoderGrid::new(self.forward(&image_to_tensor(img, dtype)?)?)
    }
}

/// Trainable projections and MLP of the prompt module.
pub struct Cipm {
    spec: CipmSpec,
    prompt_dim: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl Cipm {
    pub fn new(ps: &mut ParamStore, spec: &CipmSpec, prompt_dim: usize) -> Result<Self> {
        let (de, dk) = (spec.encoder_dim, spec.attn_dim);
        Ok(Self {
            spec: spec.clone(),
            prompt_dim,
            wq: Linear::new(ps, "cipm/wq", de, dk, false)?,
            wk: Linear::new(ps, "cipm/wk", de, dk, false)?,
            wv: Linear::new(ps, "cipm/wv", de, dk, false)?,
            mlp_in: Linear::new(ps, "cipm/mlp/in", dk, 2 * prompt_dim, true)?,
            mlp_out: Linear::new(ps, "cipm/mlp/out", 2 * prompt_dim, prompt_dim, true)?,
        })
    }

    pub fn spec(&self) -> &CipmSpec {
        &self.spec
    }

    /// Number of prompt tokens emitted per image in `mode`.
    pub fn prompt_len(&self, mode: PromptMode) -> usize {
        let g2 = self.spec.grid * self.spec.grid;
        match mode {
            PromptMode::Shared => 2 * g2,
            _ => g2,
        }
    }

    /// Attention weights `softmax(Q K^T / sqrt(d_k))`, `[B, Lq, Lk]`.
    pub fn attention_weights(&self, query_tokens: &Tensor, kv_tokens: &Tensor) -> Result<Tensor> {
        let q = self.wq.forward(query_tokens)?;
        let k = self.wk.forward(kv_tokens)?;
        let logits = (q.matmul(&k.t()?)? / (self.spec.attn_dim as f64).sqrt())?;
        Ok(crate::ops::softmax(&logits, candle_core::D::Minus1)?)
    }

    /// Attended vectors before the MLP, `[B, Lq, d_k]`.
    pub fn attend(&self, query_tokens: &Tensor, kv_tokens: &Tensor) -> Result<Tensor> {
        let v = self.wv.forward(kv_tokens)?;
        Ok(self.attention_weights(query_tokens, kv_tokens)?.matmul(&v)?)
    }

    pub fn mlp(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp_out.forward(&self.mlp_in.forward(x)?.gelu()?)
    }

    /// Prompts for a batch of pairs: `fa, fb [B, d_e, g, g] -> ([B, L, d_p], [B, L, d_p])`.
    pub fn prompts(&self, fa: &Tensor, fb: &Tensor, mode: PromptMode) -> Result<(Tensor, Tensor)> {
        if fa.dims() != fb.dims() {
            return Err(ModelError::Shape(format!("encoder grids differ: {:?} vs {:?}", fa.dims(), fb.dims())));
        }
        let (b, de, g, _) = fa.dims4()?;
        if de != self.spec.encoder_dim || g != self.spec.grid {
            return Err(ModelError::Shape(format!(
                "encoder grid [{de}, {g}, {g}] does not match configured [{}, {}, {}]",
                self.spec.encoder_dim, self.spec.grid, self.spec.grid
            )));
        }
        let ta = layers::to_tokens(fa)?;
        let tb = layers::to_tokens(fb)?;
        Ok(match mode {
            PromptMode::Cross => (self.mlp(&self.attend(&ta, &tb)?)?, self.mlp(&self.attend(&tb, &ta)?)?),
            PromptMode::Individual => (self.mlp(&self.attend(&ta, &ta)?)?, self.mlp(&self.attend(&tb, &tb)?)?),
            PromptMode::Shared => {
                let joint = Tensor::cat(&[&ta, &tb], 1)?;
                let p = self.mlp(&self.attend(&joint, &joint)?)?;
                (p.clone(), p)
            }
            PromptMode::Empty => {
                let z = Tensor::zeros((b, g * g, self.prompt_dim), fa.dtype(), fa.device())?;
                (z.clone(), z)
            }
        })
    }

    /// Cross-attended prompts for one image pair.
    pub fn cross_prompt(&self, fa: &EncoderGrid, fb: &EncoderGrid) -> Result<(PromptEmbedding, PromptEmbedding)> {
        self.prompt_pair(fa, fb, PromptMode::Cross)
    }

    pub fn prompt_pair(
        &self,
        fa: &EncoderGrid,
        fb: &EncoderGrid,
        mode: PromptMode,
    ) -> Result<(PromptEmbedding, PromptEmbedding)> {
        let (pa, pb) = self.prompts(&fa.tensor.unsqueeze(0)?, &fb.tensor.unsqueeze(0)?, mode)?;
        Ok((PromptEmbedding::from_tensor(&pa)?, PromptEmbedding::from_tensor(&pb)?))
    }
}

//! Prompt-conditioned UNet feature extractor.
//!
//! A clean image is encoded to a stride-8 latent by a frozen strided encoder,
//! optionally noised along a linear-beta forward diffusion schedule, and run
//! through a small UNet whose residual blocks see a sinusoidal timestep
//! embedding and whose attention blocks cross-attend to the prompt tokens.
//! The activations of one up-path stage are returned as coarse features.

use candle_core::{DType, Device, Tensor};
use imd_core::{FeatureMap, Image, COARSE_STRIDE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{BackboneSpec, TapPoint};
use crate::error::{ModelError, Result};
use crate::layers::{self, Conv2d, ConvSpec, GroupNorm, Linear};
use crate::params::ParamStore;

/// Cumulative signal coefficients of the forward diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_bar[t] = prod_{s=1..t} (1 - beta_s)` with `beta` linearly spaced
    /// over `[beta_min, beta_max]`; `alpha_bar[0] = 1`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(ModelError::Config("noise schedule needs at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(ModelError::Config(format!(
                "beta range must satisfy 0 < {beta_min} <= {beta_max} < 1"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 1..=steps {
            let frac = if steps == 1 { 0.0 } else { (s - 1) as f64 / (steps - 1) as f64 };
            let beta = beta_min + (beta_max - beta_min) * frac;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        if acc <= 0.0 {
            return Err(ModelError::Config("schedule underflows to zero signal".into()));
        }
        Ok(Self { alpha_bar })
    }

    /// Total number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Option<f64> {
        self.alpha_bar.get(t).copied()
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self
            .alpha_bar(t)
            .ok_or_else(|| ModelError::Config(format!("timestep {t} outside [0, {}]", self.steps())))?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }
}

/// Stride-8 latent `[c_z, H/8, W/8]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(pub FeatureMap);

impl Latent {
    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (c, h, w) = self.0.shape();
        Ok(Tensor::from_slice(self.0.data(), (1, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self(feature_map_from_tensor(t, COARSE_STRIDE)?))
    }
}

/// Prompt tokens `[L, d_p]` fed to the UNet's cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    len: usize,
    width: usize,
    tokens: Vec<f32>,
}

impl PromptEmbedding {
    pub fn new(len: usize, width: usize, tokens: Vec<f32>) -> Result<Self> {
        if tokens.len() != len * width {
            return Err(ModelError::Shape(format!(
                "prompt buffer has {} values, expected {len}x{width}",
                tokens.len()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Shape("prompt contains non-finite values".into()));
        }
        Ok(Self { len, width, tokens })
    }

    pub fn zeros(len: usize, width: usize) -> Self {
        Self { len, width, tokens: vec![0.0; len * width] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.tokens, (1, self.len, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// From `[1, L, d]` or `[L, d]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 3 { t.squeeze(0)? } else { t.clone() };
        let (len, width) = t.dims2()?;
        Self::new(len, width, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// `[1, C, h, w]` (or `[C, h, w]`) tensor to a [`FeatureMap`].
pub fn feature_map_from_tensor(t: &Tensor, stride: usize) -> Result<FeatureMap> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    Ok(FeatureMap::new(c, h, w, stride, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)?)
}

/// [`FeatureMap`] to a `[1, C, h, w]` tensor.
pub fn feature_map_to_tensor(f: &FeatureMap, dtype: DType) -> Result<Tensor> {
    let (c, h, w) = f.shape();
    Ok(Tensor::from_slice(f.data(), (1, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Image to a normalized `[1, 3, H, W]` tensor.
pub fn image_to_tensor(img: &Image, dtype: DType) -> Result<Tensor> {
    let chw = img.to_chw_normalized();
    Ok(Tensor::from_vec(chw, (1, 3, img.height(), img.width()), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Frozen stride-8 encoder standing in for the diffusion model's VAE.
pub struct LatentEncoder {
    convs: [Conv2d; 3],
}

impl LatentEncoder {
    pub fn new(ps: &mut ParamStore, latent_channels: usize) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::frozen(ps, "latent_encoder/conv0", ConvSpec::k3(3, 16).stride(2))?,
                Conv2d::frozen(ps, "latent_encoder/conv1", ConvSpec::k3(16, 32).stride(2))?,
                Conv2d::frozen(ps, "latent_encoder/conv2", ConvSpec::k3(32, latent_channels).stride(2))?,
            ],
        })
    }

    /// `[B, 3, H, W] -> [B, c_z, H/8, W/8]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % COARSE_STRIDE != 0 || w % COARSE_STRIDE != 0 {
            return Err(ModelError::Shape(format!("image {w}x{h} not divisible by {COARSE_STRIDE}")));
        }
        let x = self.convs[0].forward(x)?.silu()?;
        let x = self.convs[1].forward(&x)?.silu()?;
        self.convs[2].forward(&x)
    }

    pub fn encode(&self, img: &Image, dtype: DType) -> Result<Latent> {
        img.ensure_divisible_by(COARSE_STRIDE)?;
        Latent::from_tensor(&self.forward(&image_to_tensor(img, dtype)?)?)
    }
}

/// Forward-diffuses `z0` to timestep `t` with seeded standard normal noise.
pub fn add_noise(z0: &Latent, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Latent> {
    let (signal, noise) = schedule.coefficients(t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = z0
        .0
        .data()
        .iter()
        .map(|&z| {
            let eps: f64 = rng.sample(StandardNormal);
            (signal * z as f64 + noise * eps) as f32
        })
        .collect();
    let (c, h, w) = z0.0.shape();
    Ok(Latent(FeatureMap::new(c, h, w, COARSE_STRIDE, data)?))
}

/// Tensor form of [`add_noise`] drawing from a caller-owned generator.
pub fn add_noise_tensor(z0: &Tensor, t: usize, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (signal, noise) = schedule.coefficients(t)?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let eps: Vec<f64> = (0..z0.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    let eps = Tensor::from_vec(eps, z0.dims(), z0.device())?.to_dtype(z0.dtype())?;
    Ok(((z0 * signal)? + (eps * noise)?)?)
}

/// Sinusoidal embedding of a scalar timestep, `[1, dim]`.
pub fn timestep_embedding(t: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = vec![0f64; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Ok(Tensor::from_vec(v, (1, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, temb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(ps, &format!("{name}/norm1"), groups, c_in)?,
            conv1: Conv2d::new(ps, &format!("{name}/conv1"), ConvSpec::k3(c_in, c_out))?,
            temb: Linear::new(ps, &format!("{name}/temb"), temb, c_out, true)?,
            norm2: GroupNorm::new(ps, &format!("{name}/norm2"), groups, c_out)?,
            conv2: Conv2d::new(ps, &format!("{name}/conv2"), ConvSpec::k3(c_out, c_out))?,
            shortcut: if c_in != c_out {
                Some(Conv2d::new(ps, &format!("{name}/shortcut"), ConvSpec::k1(c_in, c_out))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?;
        let h = h.broadcast_add(&t.reshape((t.dim(0)?, t.dim(1)?, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Spatial features attend to the prompt tokens (single head).
struct CrossAttnBlock {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttnBlock {
    fn new(ps: &mut ParamStore, name: &str, channels: usize, prompt_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}/norm"), groups, channels)?,
            q: Linear::new(ps, &format!("{name}/q"), channels, channels, false)?,
            k: Linear::new(ps, &format!("{name}/k"), prompt_dim, channels, false)?,
            v: Linear::new(ps, &format!("{name}/v"), prompt_dim, channels, false)?,
            out: Linear::new(ps, &format!("{name}/out"), channels, channels, true)?,
        })
    }

    fn forward(&self, x: &Tensor, prompt: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let tokens = layers::to_tokens(&self.norm.forward(x)?)?;
        let q = self.q.forward(&tokens)?;
        let k = self.k.forward(prompt)?;
        let v = self.v.forward(prompt)?;
        let attended = self.out.forward(&layers::attention(&q, &k, &v)?)?;
        Ok((x + layers::from_tokens(&attended, h, w)?)?)
    }
}

struct Unit {
    res: ResBlock,
    attn: CrossAttnBlock,
}

impl Unit {
    fn forward(&self, x: &Tensor, temb: &Tensor, prompt: &Tensor) -> Result<Tensor> {
        self.attn.forward(&self.res.forward(x, temb)?, prompt)
    }
}

struct UpStage {
    units: Vec<Unit>,
    upsample: Option<Conv2d>,
}

/// Desk-scale UNet: two down stages, a middle stage and two up stages.
pub struct Unet {
    spec: BackboneSpec,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: [Unit; 2],
    downsample: Conv2d,
    mid: (ResBlock, CrossAttnBlock, ResBlock),
    up: [UpStage; 2],
    head: Conv2d,
}

impl Unet {
    pub fn new(ps: &mut ParamStore, spec: &BackboneSpec) -> Result<Self> {
        let [c1, c2] = spec.channels;
        let (te, g, dp) = (spec.time_embed_dim, spec.groups, spec.prompt_dim);
        let tapped = tap_channels(spec)?;
        let unit = |ps: &mut ParamStore, name: &str, cin: usize, cout: usize| -> Result<Unit> {
            Ok(Unit {
                res: ResBlock::new(ps, &format!("{name}/res"), cin, cout, te, g)?,
                attn: CrossAttnBlock::new(ps, &format!("{name}/attn"), cout, dp, g)?,
            })
        };
        let time_in = Linear::new(ps, "unet/time/l1", c1, te, true)?;
        let time_out = Linear::new(ps, "unet/time/l2", te, te, true)?;
        let conv_in = Conv2d::new(ps, "unet/conv_in", ConvSpec::k3(spec.latent_channels, c1))?;
        let down0 = unit(ps, "unet/down0", c1, c1)?;
        let downsample = Conv2d::new(ps, "unet/down0/downsample", ConvSpec::k3(c1, c1).stride(2))?;
        let down1 = unit(ps, "unet/down1", c1, c2)?;
        let mid = (
            ResBlock::new(ps, "unet/mid/res0", c2, c2, te, g)?,
            CrossAttnBlock::new(ps, "unet/mid/attn", c2, dp, g)?,
            ResBlock::new(ps, "unet/mid/res1", c2, c2, te, g)?,
        );
        let mut up0 = Vec::new();
        for i in 0..spec.up_layers {
            let cin = if i == 0 { 2 * c2 } else { c2 };
            up0.push(unit(ps, &format!("unet/up0/unit{i}"), cin, c2)?);
        }
        let upsample = Conv2d::new(ps, "unet/up0/upsample", ConvSpec::k3(c2, c2))?;
        let mut up1 = Vec::new();
        for i in 0..spec.up_layers {
            let cin = if i == 0 { c2 + c1 } else { c1 };
            up1.push(unit(ps, &format!("unet/up1/unit{i}"), cin, c1)?);
        }
        let head = Conv2d::new(ps, "unet/head", ConvSpec::k1(tapped, spec.out_channels))?;
        Ok(Self {
            spec: spec.clone(),
            time_in,
            time_out,
            conv_in,
            down: [down0, down1],
            downsample,
            mid,
            up: [UpStage { units: up0, upsample: Some(upsample) }, UpStage { units: up1, upsample: None }],
            head,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// `z [B, c_z, h, w]`, `prompt [B, L, d_p]` -> coarse features `[B, C_out, h, w]`.
    pub fn forward(&self, z: &Tensor, t: usize, prompt: &Tensor) -> Result<Tensor> {
        let (b, _, h0, w0) = z.dims4()?;
        let pb = prompt.dim(0)?;
        if prompt.dim(2)? != self.spec.prompt_dim {
            return Err(ModelError::Shape(format!(
                "prompt width {} does not match backbone conditioning width {}",
                prompt.dim(2)?,
                self.spec.prompt_dim
            )));
        }
        let prompt = if pb == b { prompt.clone() } else { prompt.broadcast_as((b, prompt.dim(1)?, prompt.dim(2)?))?.contiguous()? };
        let temb = timestep_embedding(t, self.spec.channels[0], z.dtype())?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?;
        let temb = temb.broadcast_as((b, self.spec.time_embed_dim))?.contiguous()?;

        let h = self.conv_in.forward(z)?;
        let h = self.down[0].forward(&h, &temb, &prompt)?;
        let skip0 = h.clone();
        let h = self.downsample.forward(&h)?;
        let h = self.down[1].forward(&h, &temb, &prompt)?;
        let skip1 = h.clone();
        let h = self.mid.0.forward(&h, &temb)?;
        let h = self.mid.1.forward(&h, &prompt)?;
        let mut h = self.mid.2.forward(&h, &temb)?;

        let skips = [skip1, skip0];
        let mut unit_index = 0;
        let mut tapped = None;
        'stages: for (stage_idx, stage) in self.up.iter().enumerate() {
            for (i, unit) in stage.units.iter().enumerate() {
                if i == 0 {
                    h = Tensor::cat(&[&h, &skips[stage_idx]], 1)?;
                }
                h = unit.forward(&h, &temb, &prompt)?;
                if self.spec.tap == TapPoint::UpResnet(unit_index) {
                    tapped = Some(h.clone());
                    break 'stages;
                }
                unit_index += 1;
            }
            if let Some(conv) = &stage.upsample {
                let (_, _, sh, sw) = skips[1].dims4()?;
                h = conv.forward(&layers::resize_nearest(&h, sh, sw)?)?;
            }
            if self.spec.tap == TapPoint::UpBlock(stage_idx) {
                tapped = Some(h.clone());
                break;
            }
        }
        let tapped = tapped.ok_or_else(|| ModelError::Config(format!("tap {:?} not reached", self.spec.tap)))?;
        let (_, _, th, tw) = tapped.dims4()?;
        if (th, tw) != (h0, w0) {
            return Err(ModelError::Shape(format!("tap {:?} is not at stride {COARSE_STRIDE}", self.spec.tap)));
        }
        self.head.forward(&tapped)
    }

    /// Single-image feature extraction at stride 8.
    pub fn extract_features(&self, z_t: &Latent, t: usize, prompt: &PromptEmbedding, dtype: DType) -> Result<FeatureMap> {
        if prompt.width() != self.spec.prompt_dim {
            return Err(ModelError::Shape(format!(
                "prompt width {} does not match backbone conditioning width {}",
                prompt.width(),
                self.spec.prompt_dim
            )));
        }
        let out = self.forward(&z_t.to_tensor(dtype)?, t, &prompt.to_tensor(dtype)?)?;
        feature_map_from_tensor(&out, COARSE_STRIDE)
    }
}

/// Channel count at the configured tap; errors for taps not at stride 8.
fn tap_channels(spec: &BackboneSpec) -> Result<usize> {
    let [c1, c2] = spec.channels;
    match spec.tap {
        TapPoint::UpBlock(0) => Ok(c2),
        TapPoint::UpBlock(1) => Ok(c1),
        TapPoint::UpResnet(k) if k >= spec.up_layers && k < 2 * spec.up_layers => Ok(c1),
        TapPoint::UpResnet(k) if k < spec.up_layers => Err(ModelError::Config(format!(
            "residual unit {k} runs at stride {}, features must be tapped at stride {COARSE_STRIDE}",
            2 * COARSE_STRIDE
        ))),
        other => Err(ModelError::Config(format!("tap {other:?} does not exist in a two-stage up path"))),
    }
}

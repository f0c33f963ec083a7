//! The assembled matcher.

use std::path::Path;

use candle_core::{DType, Tensor};
use imd_core::{CoarseMatchSet, FeatureMap, FineMatchSet, Image, MatchingConfig, COARSE_STRIDE, FINE_STRIDE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{add_noise_tensor, feature_map_from_tensor, image_to_tensor, LatentEncoder, NoiseSchedule, Unet};
use crate::cipm::{Cipm, ImageEncoder};
use crate::coarse::{dual_softmax_tensor, score_tensor, select_matches, CoarseTransformer, ProbabilityMatrix};
use crate::config::{ModelConfig, PromptMode};
use crate::error::{ModelError, Result};
use crate::fine::{refine, FineEncoder, Fusion};
use crate::layers;
use crate::params::ParamStore;

/// Runtime knobs that do not change the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub matching: MatchingConfig,
    pub prompt_mode: PromptMode,
}

impl RunOptions {
    pub fn new(matching: MatchingConfig, prompt_mode: PromptMode) -> Self {
        Self { matching, prompt_mode }
    }
}

/// Intermediate tensors of one batched forward pass.
pub struct Forward {
    /// Transformed coarse features `[B, C, h, w]`.
    pub coarse_a: Tensor,
    pub coarse_b: Tensor,
    /// Dual-softmax probabilities `[B, h*w, h*w]`.
    pub prob: Tensor,
    /// Fused fine features `[B, C_f, 4h, 4w]`.
    pub fine_a: Tensor,
    pub fine_b: Tensor,
}

/// Matches of one image pair.
#[derive(Debug, Clone)]
pub struct PairMatches {
    pub coarse: CoarseMatchSet,
    pub fine: FineMatchSet,
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
}

pub struct ImdModel {
    config: ModelConfig,
    params: ParamStore,
    schedule: NoiseSchedule,
    latent: LatentEncoder,
    unet: Unet,
    image_encoder: ImageEncoder,
    cipm: Cipm,
    coarse: CoarseTransformer,
    fine_encoder: FineEncoder,
    fusion: Fusion,
}

impl ImdModel {
    pub fn new(config: ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.seed, dtype);
        let b = &config.backbone;
        let schedule = NoiseSchedule::linear(b.schedule_steps, b.beta_min, b.beta_max)?;
        let latent = LatentEncoder::new(&mut ps, b.latent_channels)?;
        let image_encoder = ImageEncoder::new(&mut ps, &config.cipm)?;
        let cipm = Cipm::new(&mut ps, &config.cipm, b.prompt_dim)?;
        let unet = Unet::new(&mut ps, b)?;
        let coarse = CoarseTransformer::new(&mut ps, b.out_channels, 2)?;
        let fine_encoder = FineEncoder::new(&mut ps, config.fine_channels)?;
        let fusion = Fusion::new(&mut ps, b.out_channels, config.fine_channels)?;
        Ok(Self { config, params: ps, schedule, latent, unet, image_encoder, cipm, coarse, fine_encoder, fusion })
    }

    /// Builds the model described by a checkpoint's manifest and loads its weights.
    pub fn load(dir: &Path, dtype: DType) -> Result<Self> {
        let manifest = crate::params::read_manifest(dir)?;
        let config: ModelConfig = serde_json::from_value(manifest.spec.clone()).map_err(|e| {
            ModelError::CheckpointMismatch(format!("~ spec: not a model configuration ({e})"))
        })?;
        let model = Self::new(config, dtype)?;
        model.params.load(dir, &model.config.to_json_value())?;
        Ok(model)
    }

    /// Loads weights into this already-built model; fails with a diff when
    /// the checkpoint describes a different architecture.
    pub fn load_weights(&self, dir: &Path) -> Result<()> {
        self.params.load(dir, &self.config.to_json_value())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir, self.config.to_json_value())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn latent_encoder(&self) -> &LatentEncoder {
        &self.latent
    }

    pub fn unet(&self) -> &Unet {
        &self.unet
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image_encoder
    }

    pub fn cipm(&self) -> &Cipm {
        &self.cipm
    }

    pub fn coarse_transformer(&self) -> &CoarseTransformer {
        &self.coarse
    }

    pub fn fine_encoder(&self) -> &FineEncoder {
        &self.fine_encoder
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    /// Coarse features `[B, C, h, w]` of both sides before the attention transform.
    pub fn backbone_features(
        &self,
        a: &Tensor,
        b: &Tensor,
        opts: &RunOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor)> {
        let t = opts.matching.timestep;
        let za = add_noise_tensor(&self.latent.forward(a)?.detach(), t, &self.schedule, rng)?;
        let zb = add_noise_tensor(&self.latent.forward(b)?.detach(), t, &self.schedule, rng)?;
        let ea = self.image_encoder.forward(a)?.detach();
        let eb = self.image_encoder.forward(b)?.detach();
        let (pa, pb) = self.cipm.prompts(&ea, &eb, opts.prompt_mode)?;
        Ok((self.unet.forward(&za, t, &pa)?, self.unet.forward(&zb, t, &pb)?))
    }

    /// Full batched forward pass on normalized images `[B, 3, H, W]`.
    pub fn forward(&self, a: &Tensor, b: &Tensor, opts: &RunOptions, rng: &mut ChaCha8Rng) -> Result<Forward> {
        let m = &opts.matching;
        let (ca, cb) = self.backbone_features(a, b, opts, rng)?;
        let (_, _, ha, wa) = ca.dims4()?;
        let (_, _, hb, wb) = cb.dims4()?;
        let (ta, tb) = self.coarse.forward_tokens_rounds(&ca, &cb, m.n_attn)?;
        let prob = dual_softmax_tensor(&score_tensor(&ta, &tb, m.temperature)?)?;
        let coarse_a = layers::from_tokens(&ta, ha, wa)?;
        let coarse_b = layers::from_tokens(&tb, hb, wb)?;
        let fine_a = self.fusion.forward(&self.fine_encoder.forward(a)?, &coarse_a)?;
        let fine_b = self.fusion.forward(&self.fine_encoder.forward(b)?, &coarse_b)?;
        Ok(Forward { coarse_a, coarse_b, prob, fine_a, fine_b })
    }

    /// Coarse and fine matches of one image pair.
    pub fn match_pair(&self, a: &Image, b: &Image, opts: &RunOptions) -> Result<PairMatches> {
        a.ensure_divisible_by(COARSE_STRIDE)?;
        b.ensure_divisible_by(COARSE_STRIDE)?;
        let m = &opts.matching;
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        let dtype = self.dtype();
        let out = self.forward(&image_to_tensor(a, dtype)?, &image_to_tensor(b, dtype)?, opts, &mut rng)?;
        let prob = ProbabilityMatrix::new(out.prob.squeeze(0)?)?;
        let coarse = select_matches(&prob, m.tau)?;
        let fa: FeatureMap = feature_map_from_tensor(&out.fine_a, FINE_STRIDE)?;
        let fb: FeatureMap = feature_map_from_tensor(&out.fine_b, FINE_STRIDE)?;
        let fine = refine(&fa, &fb, &coarse, m.fine_window, m.fine_temperature)?;
        Ok(PairMatches {
            coarse,
            fine,
            grid_a: (a.width() / COARSE_STRIDE, a.height() / COARSE_STRIDE),
            grid_b: (b.width() / COARSE_STRIDE, b.height() / COARSE_STRIDE),
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::{BackboneSpec, CipmSpec};

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneSpec {
                latent_channels: 4,
                channels: [8, 16],
                out_channels: 16,
                prompt_dim: 8,
                time_embed_dim: 16,
                groups: 4,
                ..BackboneSpec::default()
            },
            cipm: CipmSpec { encoder_dim: 8, grid: 4, attn_dim: 8, mode: PromptMode::Cross },
            fine_channels: 8,
            seed: 5,
        }
    }

    fn textured(id: &str, shift: usize) -> Image {
        let mut px = Vec::new();
        for y in 0..32usize {
            for x in 0..32usize {
                let v = (((x + shift) * 37 + y * 91) % 251) as u8;
                px.extend([v, v.wrapping_mul(3), 255 - v]);
            }
        }
        Image::new(id, 32, 32, px).unwrap()
    }

    #[test]
    fn match_pair_is_deterministic_and_in_bounds() {
        let model = ImdModel::new(tiny(), DType::F32).unwrap();
        let opts = RunOptions::new(MatchingConfig { tau: 0.01, ..MatchingConfig::default() }, PromptMode::Cross);
        let (a, b) = (textured("a", 0), textured("b", 3));
        let m1 = model.match_pair(&a, &b, &opts).unwrap();
        let m2 = model.match_pair(&a, &b, &opts).unwrap();
        assert_eq!(m1.fine, m2.fine);
        assert_eq!(m1.grid_a, (4, 4));
        assert!(m1.fine.len() <= m1.coarse.len());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let model = ImdModel::new(tiny(), DType::F32).unwrap();
        model.save(dir.path()).unwrap();
        let loaded = ImdModel::load(dir.path(), DType::F32).unwrap();
        let opts = RunOptions::new(MatchingConfig { tau: 0.01, ..MatchingConfig::default() }, PromptMode::Cross);
        let (a, b) = (textured("a", 0), textured("b", 2));
        assert_eq!(model.match_pair(&a, &b, &opts).unwrap().fine, loaded.match_pair(&a, &b, &opts).unwrap().fine);

        let mut other = tiny();
        other.fine_channels = 16;
        let different = ImdModel::new(other, DType::F32).unwrap();
        let err = different.load_weights(dir.path()).unwrap_err().to_string();
        assert!(err.contains("spec.fine_channels"), "{err}");
    }
}

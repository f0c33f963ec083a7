//! Seams for swapping in external pretrained components.

use imd_core::{FeatureMap, Image};

use crate::backbone::{add_noise, PromptEmbedding};
use crate::cipm::EncoderGrid;
use crate::config::TapPoint;
use crate::error::Result;
use crate::model::ImdModel;

/// Image-to-coarse-feature extractor conditioned on a timestep and a prompt.
pub trait FeatureExtractor {
    /// Stride-8 features of `image` noised to step `t`.
    fn extract(&self, image: &Image, t: usize, prompt: &PromptEmbedding) -> Result<FeatureMap>;

    /// Width of the prompt tokens the extractor consumes.
    fn prompt_dim(&self) -> usize;

    /// Which up-path activation is returned, in either counting convention.
    fn tap(&self) -> TapPoint;
}

/// Frozen image encoder producing a square patch grid.
pub trait PatchEncoder {
    fn encode(&self, image: &Image) -> Result<EncoderGrid>;
}

/// The built-in latent encoder and UNet behind the [`FeatureExtractor`] seam.
pub struct DeskExtractor<'a> {
    model: &'a ImdModel,
    noise_seed: u64,
}

impl<'a> DeskExtractor<'a> {
    pub fn new(model: &'a ImdModel, noise_seed: u64) -> Self {
        Self { model, noise_seed }
    }
}

impl FeatureExtractor for DeskExtractor<'_> {
    fn extract(&self, image: &Image, t: usize, prompt: &PromptEmbedding) -> Result<FeatureMap> {
        let dtype = self.model.dtype();
        let z0 = self.model.latent_encoder().encode(image, dtype)?;
        let zt = add_noise(&z0, t, self.model.schedule(), self.noise_seed)?;
        self.model.unet().extract_features(&zt, t, prompt, dtype)
    }

    fn prompt_dim(&self) -> usize {
        self.model.config().backbone.prompt_dim
    }

    fn tap(&self) -> TapPoint {
        self.model.config().backbone.tap
    }
}

/// The built-in frozen encoder behind the [`PatchEncoder`] seam.
pub struct DeskEncoder<'a> {
    model: &'a ImdModel,
}

impl<'a> DeskEncoder<'a> {
    pub fn new(model: &'a ImdModel) -> Self {
        Self { model }
    }
}

impl PatchEncoder for DeskEncoder<'_> {
    fn encode(&self, image: &Image) -> Result<EncoderGrid> {
        self.model.image_encoder().encode(image, self.model.dtype())
    }
}

/// Prompts for a pair from any encoder, then features from any extractor.
pub fn extract_pair(
    model: &ImdModel,
    encoder: &dyn PatchEncoder,
    extractor: &dyn FeatureExtractor,
    a: &Image,
    b: &Image,
    t: usize,
    mode: crate::config::PromptMode,
) -> Result<(FeatureMap, FeatureMap)> {
    let (pa, pb) = model.cipm().prompt_pair(&encoder.encode(a)?, &encoder.encode(b)?, mode)?;
    Ok((extractor.extract(a, t, &pa)?, extractor.extract(b, t, &pb)?))
}

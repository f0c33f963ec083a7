use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// How the per-image prompt embeddings are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// All-zero prompt; no conditioning information.
    Empty,
    /// Each image attends only to itself; the partner is ignored.
    Individual,
    /// Both images' tokens are concatenated into one prompt shared by the pair.
    Shared,
    /// Queries from one image, keys and values from the other.
    Cross,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [PromptMode::Empty, PromptMode::Individual, PromptMode::Shared, PromptMode::Cross];
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Empty => "empty",
            PromptMode::Individual => "individual",
            PromptMode::Shared => "shared",
            PromptMode::Cross => "cross",
        })
    }
}

impl FromStr for PromptMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empty" => Ok(PromptMode::Empty),
            "individual" => Ok(PromptMode::Individual),
            "shared" => Ok(PromptMode::Shared),
            "cross" => Ok(PromptMode::Cross),
            other => Err(ModelError::Config(format!(
                "unknown prompt mode {other:?} (expected empty, individual, shared or cross)"
            ))),
        }
    }
}

/// Which activation of the UNet up path is returned as the coarse feature map.
///
/// Diffusion feature extractors disagree on whether "up-block n" counts
/// resolution stages or residual blocks, so both are expressible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Output of resolution stage `n` of the up path (after its upsampler).
    UpBlock(usize),
    /// Output of the `n`-th residual(+attention) unit of the up path, counted
    /// across stages.
    UpResnet(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    /// Channels of the frozen stride-8 latent.
    pub latent_channels: usize,
    /// UNet widths at the latent resolution and at half of it.
    pub channels: [usize; 2],
    /// Residual units per up stage.
    pub up_layers: usize,
    pub tap: TapPoint,
    /// Width of the emitted coarse features.
    pub out_channels: usize,
    /// Prompt token width consumed by the cross-attention blocks.
    pub prompt_dim: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            latent_channels: 16,
            channels: [32, 64],
            up_layers: 1,
            tap: TapPoint::UpBlock(1),
            out_channels: 64,
            prompt_dim: 64,
            time_embed_dim: 128,
            groups: 8,
            schedule_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CipmSpec {
    /// Width of the frozen image encoder's patch grid.
    pub encoder_dim: usize,
    /// Side of the patch grid.
    pub grid: usize,
    /// Query/key/value width.
    pub attn_dim: usize,
    pub mode: PromptMode,
}

impl Default for CipmSpec {
    fn default() -> Self {
        Self { encoder_dim: 32, grid: 16, attn_dim: 32, mode: PromptMode::Cross }
    }
}

/// Architecture of the whole matcher; stored in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub cipm: CipmSpec,
    /// Width of the stride-2 fine features.
    pub fine_channels: usize,
    /// Seed of the parameter initialization stream.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { backbone: BackboneSpec::default(), cipm: CipmSpec::default(), fine_channels: 64, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.channels.iter().any(|c| c % b.groups != 0) {
            return Err(ModelError::Config(format!(
                "UNet widths {:?} must be divisible by {} groups",
                b.channels, b.groups
            )));
        }
        if b.up_layers == 0 || b.out_channels == 0 || b.prompt_dim == 0 {
            return Err(ModelError::Config("backbone widths must be positive".into()));
        }
        if !(0.0 < b.beta_min && b.beta_min <= b.beta_max && b.beta_max < 1.0) || b.schedule_steps == 0 {
            return Err(ModelError::Config("invalid noise schedule".into()));
        }
        if self.fine_channels < 2 || self.cipm.grid == 0 || self.cipm.attn_dim == 0 {
            return Err(ModelError::Config("fine/prompt widths must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("model config serializes")
    }
}

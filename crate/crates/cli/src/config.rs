//! The run configuration file written by `imd config init`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use imd_core::MatchingConfig;
use imd_data::TextureMode;
use imd_model::config::{CipmSpec, ModelConfig, PromptMode, TapPoint};
use imd_model::train::TrainOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    /// Save an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            steps: t.steps,
            lr: t.lr,
            batch: t.batch,
            weight_decay: t.weight_decay,
            checkpoint_every: 0,
            log_every: t.log_every,
        }
    }
}

impl TrainSettings {
    pub fn options(&self, checkpoint_dir: Option<PathBuf>) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            weight_decay: self.weight_decay,
            checkpoint_every: (self.checkpoint_every > 0).then_some(self.checkpoint_every),
            checkpoint_dir,
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Transfer-error inlier threshold of homography RANSAC, in pixels.
    pub homography_ransac_px: f64,
    /// Sampson inlier threshold of essential-matrix RANSAC, in pixels.
    pub pose_ransac_px: f64,
    pub homography_thresholds_px: Vec<f64>,
    pub pose_thresholds_deg: Vec<f64>,
    pub ransac_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            homography_ransac_px: 3.0,
            pose_ransac_px: 0.5,
            homography_thresholds_px: vec![3.0, 5.0, 10.0],
            pose_thresholds_deg: vec![5.0, 10.0, 20.0],
            ransac_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub width: usize,
    pub height: usize,
    pub texture: TextureMode,
    /// Strength of random warps in `[0, 1]`.
    pub warp_magnitude: f64,
    pub instances: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { width: 64, height: 64, texture: TextureMode::Mixed, warp_magnitude: 0.5, instances: 3 }
    }
}

/// Everything a command needs besides its positional inputs.
///
/// Every field is written out by `imd config init`; loading rejects unknown
/// keys so a typo never silently falls back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub matching: MatchingConfig,
    /// Architecture; `model.cipm.mode` selects the prompt mode.
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub data: DataSettings,
    /// Fine matches whose 5x5 source patch has a lower gray-level standard
    /// deviation (0-255 scale) are discarded; 0 keeps everything.
    pub min_texture_std: f64,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            matching: MatchingConfig::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            data: DataSettings::default(),
            min_texture_std: 2.0,
            train_data: None,
            test_data: None,
            checkpoint: None,
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Narrow model sized for single-machine CPU training on 64x64 pairs.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        let b = &mut cfg.model.backbone;
        b.latent_channels = 8;
        b.channels = [16, 32];
        b.out_channels = 32;
        b.prompt_dim = 32;
        b.time_embed_dim = 64;
        cfg.model.cipm = CipmSpec { encoder_dim: 16, grid: 8, attn_dim: 16, mode: PromptMode::Cross };
        cfg.model.fine_channels = 32;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => bail!("unknown preset {other:?} (expected default or desk)"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.matching.validate()?;
        self.model.validate()?;
        let b = &self.model.backbone;
        let stage = match b.tap {
            TapPoint::UpBlock(n) => n,
            TapPoint::UpResnet(n) => n / b.up_layers,
        };
        if stage != self.matching.block_index {
            bail!(
                "matching.block_index = {} but model.backbone.tap {:?} lies in up-block {stage}",
                self.matching.block_index,
                b.tap
            );
        }
        if !(self.min_texture_std >= 0.0) {
            bail!("min_texture_std must be >= 0");
        }
        if self.train.batch == 0 || self.train.steps == 0 {
            bail!("train.steps and train.batch must be positive");
        }
        if self.data.width % 8 != 0 || self.data.height % 8 != 0 {
            bail!("data dims {}x{} must be multiples of 8", self.data.width, self.data.height);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }

    /// Fails when a path named in the file does not exist.
    pub fn check_paths(&self) -> Result<()> {
        for (key, p) in [("train_data", &self.train_data), ("test_data", &self.test_data), ("checkpoint", &self.checkpoint)] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("{key} {} does not exist", p.display());
                }
            }
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Hyperparameters shared by inference, training and evaluation.
///
/// Every field is written out by `imd config init`; there are no hidden defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    /// Coarse confidence threshold applied to the dual-softmax probability.
    pub tau: f64,
    /// Dual-softmax temperature for the coarse cosine score matrix.
    pub temperature: f64,
    /// Temperature of the fine local score matrix and the 3x3 expectation.
    pub fine_temperature: f64,
    /// Number of interleaved self/cross attention rounds on coarse features.
    pub n_attn: usize,
    /// Diffusion timestep used for feature extraction.
    pub timestep: usize,
    /// Up-block of the UNet whose activations are tapped.
    pub block_index: usize,
    /// Side of the square fine window cropped around every coarse match.
    pub fine_window: usize,
    /// Weight of the fine local-matrix loss.
    pub alpha: f64,
    /// Weight of the subpixel l2 loss.
    pub beta: f64,
    /// Focal modulation exponent of the coarse loss (0 = plain log-likelihood).
    pub focal_gamma: f64,
    /// Relative depth tolerance of the occlusion check in depth warping.
    pub occlusion_tolerance: f64,
    pub seed: u64,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            temperature: 0.1,
            fine_temperature: 0.1,
            n_attn: 2,
            timestep: 0,
            block_index: 1,
            fine_window: 5,
            alpha: 1.0,
            beta: 0.25,
            focal_gamma: 2.0,
            occlusion_tolerance: 0.2,
            seed: 0,
        }
    }
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(CoreError::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.temperature > 0.0) || !(self.fine_temperature > 0.0) {
            return Err(CoreError::Config("temperatures must be positive".into()));
        }
        if self.fine_window < 3 || self.fine_window % 2 == 0 {
            return Err(CoreError::Config(format!(
                "fine_window must be odd and >= 3, got {}",
                self.fine_window
            )));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() || self.focal_gamma < 0.0 {
            return Err(CoreError::Config("loss weights must be finite, focal_gamma >= 0".into()));
        }
        if !(self.occlusion_tolerance > 0.0) {
            return Err(CoreError::Config("occlusion_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = MatchingConfig::default();
        cfg.validate().unwrap();
        let back = MatchingConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_even_window_and_bad_tau() {
        let mut cfg = MatchingConfig { fine_window: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.fine_window = 5;
        cfg.tau = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"tau":0.2,"bogus":1}"#;
        assert!(MatchingConfig::from_json(text).is_err());
    }
}

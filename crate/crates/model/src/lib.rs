//! Learnable parts of the matcher: the prompt-conditioned backbone, the
//! cross-image prompt module, coarse and fine matching heads, supervision and
//! training.

pub mod adapter;
pub mod backbone;
pub mod cipm;
pub mod coarse;
pub mod config;
pub mod error;
pub mod fine;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod ops;
pub mod params;
pub mod supervision;
pub mod train;

pub use config::{BackboneSpec, CipmSpec, ModelConfig, PromptMode, TapPoint};
pub use error::{ModelError, Result};

//! Training and evaluation data: procedural textures, synthetic homography
//! and multi-instance pairs, and the on-disk dataset layout.

pub mod dataset;
pub mod error;
pub mod synth;
pub mod texture;

pub use dataset::{load_dataset, read_png, write_dataset, write_png, PairRecord, Supervision};
pub use error::{DataError, Result};
pub use synth::{gen_multi_instance_pair, gen_synthetic_pair, MultiInstancePair, SyntheticPair};
pub use texture::{Texture, TextureMode};

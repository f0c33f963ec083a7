//! Library side of the `imd` command: run configuration, dataset generation,
//! experiments and match overlays.

pub mod config;
pub mod experiments;
pub mod generate;
pub mod overlay;

pub use config::RunConfig;

//! Synthetic-data pipeline for binary image classification: diffusion
//! fine-tuning, prompt campaigns, human curation, dataset assembly, a vision
//! transformer classifier and evaluation reports.

pub mod curation;
pub mod diffusion;
pub mod dreambooth;
pub mod evaluation;
pub mod generation;
pub mod imaging;
pub mod manifest;
pub mod pipeline;
pub mod toy;
pub mod vit;

/// Release plus `git describe` of the build, e.g. `v0.1.0-g1a2b3c4`.
pub const VERSION: &str = env!("SYNTHVISION_VERSION");

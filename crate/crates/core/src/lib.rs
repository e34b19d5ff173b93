//! Caption-guided diffusion purification for robust image classification.
//!
//! The pipeline captions an input image, encodes the caption into a text
//! condition, partially noises the image's latent under a variance schedule,
//! denoises it back under that condition, and decodes the result before
//! classification. Around that core sit an L-infinity attack engine
//! (preprocessor-blind PGD, BPDA, EOT), a fine-tuning loop over purified
//! samples, and an evaluation harness that reports natural and robust
//! accuracy with full provenance.
//!
//! Start with [`diffusion::Purifier`] for the pipeline,
//! [`attacks::run_attack`] for adversarial batches, and
//! [`harness::evaluate`] for end-to-end reports. The `book/` directory of
//! the repository walks through the concepts chapter by chapter.

pub mod attacks;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod schedules;
pub mod toybench;

pub use codec::{ImageBatch, LatentBatch};
pub use error::{Error, Result};

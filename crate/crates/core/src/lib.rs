//! Fairness auditing and bias mitigation for face-based gender and country
//! classifiers.
//!
//! The crate covers the whole audit loop:
//!
//! - [`corpus`]: labeled face manifests, 200×256 crop normalization, the
//!   held-out split and the k-shot sampler.
//! - [`variants`]: seeded adversarial filters (RGB noise, spread, greyscale,
//!   mask occlusion) and variant-set generation.
//! - [`backends`]: one prediction interface over local models and remote
//!   vision APIs, with a content-addressed cache and rate limiting.
//! - [`model`]: a small trainable CNN classifier with a portable checkpoint.
//! - [`explain`]: Grad-CAM saliency and per-group averages.
//! - [`mitigation`]: k-shot fine-tuning, triplet contrastive fine-tuning,
//!   and the two-stage country-task schemes.
//! - [`audit`]: per-group accuracy, male−female disparity, variant
//!   stability, and report emission.
//! - [`cli`]: the `frs-audit` command-line front end.
//! - [`toy`]: synthetic corpora and the desk-scale mitigation experiments.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod audit;
pub mod cli;
pub mod backends;
pub mod corpus;
pub mod variants;
pub mod error;
pub mod explain;
pub mod imagebuf;
pub mod mitigation;
pub mod model;
pub mod seed;
pub mod toy;

pub use error::{Error, Result};
pub use imagebuf::ImageBuffer;

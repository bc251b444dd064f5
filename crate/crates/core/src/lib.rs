//! Decoupled multimodal representation learning on synthetic benchmarks.
//!
//! The library trains a small fusion network over V modality encoders. During
//! training the fused representation is a Gaussian `N(mu, sigma^2)` sampled per
//! step; at inference only `mu` is used. A KL term keeps the per-element
//! distributions near `N(0, 1)`, and the per-combination variance statistics
//! rank modality combinations by difficulty so the hardest ones receive an
//! extra classification loss through the shared predictor.
//!
//! Modules follow the pipeline: [`datasynth`] generates seeded multimodal
//! datasets, [`combinations`] handles modality-subset masks, [`model`] holds
//! the network and both forward paths, [`losses`] the objective terms,
//! [`mining`] the variance-ranked hard-set schedule, [`metrics`] evaluation
//! and channel-diversity measures, and [`train`]/[`sweep`]/[`checkpoint`] the
//! experiment harness used by the `dmr` binary.

pub mod checkpoint;
pub mod combinations;
pub mod config;
pub mod datasynth;
pub mod emit;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use crate::error::{DmrError, Result};

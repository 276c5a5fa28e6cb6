//! Online test-time adaptation on a small reverse-mode tensor engine.
//!
//! The crate adapts a pretrained classifier to a corrupted input stream by
//! minimizing prediction entropy on confidently-predicted samples, and
//! squeezes more signal out of those samples by perturbing an intermediate
//! feature map with channel-statistics noise and training the perturbed
//! branch against pseudo-labels from the clean branch.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`] — dense tensors with tape-based reverse-mode autodiff
//! * [`nn`] — linear/conv layers and batch/group/layer normalization
//! * [`model`] — the two-branch classifier with an augmentation hook
//! * [`augment`] — channel-statistics feature perturbation and its EMA state
//! * [`selection`] — entropy, threshold selection, exponential weighting
//! * [`losses`] — adaptation objectives, including ablation variants
//! * [`adapt`] — pretraining, the online adaptation loop, telemetry
//! * [`data`] — synthetic tasks, corruption families, scenario streams
//! * [`config`] — experiment configuration with strict validation
//! * [`report`] — versioned step logs, summaries and histograms

pub mod adapt;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod report;
pub mod rng;
pub mod selection;
pub mod tensor;

pub use error::{Error, Result};

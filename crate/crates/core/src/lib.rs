//! Self-supervised few-shot acoustic classification.
//!
//! The pipeline: WAV ingestion and manifest handling, stacked-spectrogram
//! features, waveform augmentations, a frequency-residual CNN followed by
//! diagonal state-space sequence layers, contrastive pre-training, and
//! episodic five-way five-shot fine-tuning and evaluation.

pub mod audio;
pub mod augment;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod features;
pub mod fewshot;
pub mod manifest;
pub mod nn;
pub mod trainer;
pub mod rng;
pub mod synth;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

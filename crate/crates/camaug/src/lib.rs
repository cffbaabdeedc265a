//! Interpretability-guided augmentation for multi-centre segmentation.
//!
//! The library trains a small centre classifier, extracts class-activation
//! maps from it, binarizes them, and uses the resulting masks to stochastically
//! blank centre-specific image content while a segmentation model trains.
//! Evaluation follows a leave-one-centre-out protocol so the held-out centre
//! measures generalization, never training signal.

pub mod augmentation;
pub mod classifier;
pub mod data;
pub mod error;
pub mod filters;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod saliency;
pub mod segmodels;

pub use error::{Error, Result};

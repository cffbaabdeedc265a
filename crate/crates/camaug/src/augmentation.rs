//! Saliency-guided masking.
//!
//! With probability `p`, a sample's input image (or, for the disentangled
//! model, its multi-channel anatomy representation) is multiplied pointwise
//! by the binary keep-mask, zeroing the pixels the centre classifier found
//! most centre-revealing. The decision is one Bernoulli draw per sample per
//! epoch — never per channel or per pixel — from a stream independent of
//! the standard-augmentation draws, so the two can be ablated separately.
//!
//! Geometric augmentations are applied to the keep-mask alongside the image
//! *before* masking (see [`crate::data::augment::standard_augment`]), so
//! the mask stays aligned with whatever flips and rotations hit the image.

use ndarray::Zip;
use rand::Rng;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::nn::Fm;
use crate::rng;

/// Where the keep-mask multiplication is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// Multiply the image fed to the segmentation network (encoder-decoder
    /// models consume the masked image directly).
    InputLevel,
    /// Multiply the anatomy channels between the anatomy encoder and the
    /// segmentor.
    AnatomyLevel,
}

impl std::str::FromStr for MaskingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input_level" => Ok(MaskingMode::InputLevel),
            "anatomy_level" => Ok(MaskingMode::AnatomyLevel),
            other => Err(Error::Config(format!(
                "unknown masking mode: {other} (expected input_level or anatomy_level)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskingMode::InputLevel => "input_level",
            MaskingMode::AnatomyLevel => "anatomy_level",
        })
    }
}

/// Masking probability, application point, and the seed of the decision
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskingPolicy {
    pub p: f64,
    pub mode: MaskingMode,
    pub seed: u64,
}

impl MaskingPolicy {
    pub fn new(p: f64, mode: MaskingMode, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("masking probability must be in [0,1], got {p}")));
        }
        Ok(MaskingPolicy { p, mode, seed })
    }

    /// The per-sample, per-epoch Bernoulli draw. Deterministic in
    /// (seed, sample, epoch); marginally Bernoulli(p).
    pub fn draw_mask_decision(&self, sample_id: &str, epoch: u64) -> bool {
        let mut r = rng::sample_stream(self.seed, "masking", sample_id, epoch);
        r.random_bool(self.p)
    }
}

/// Multiplies every channel by the keep-mask: kept pixels are copied
/// bit-for-bit, blocked pixels become exactly zero. Crate-visible so the
/// segmentation models can apply an already-decided mask (the public
/// policy entry points stay [`MaskingPolicy::mask_input`] and
/// [`MaskingPolicy::mask_anatomy`]).
pub(crate) fn apply_keep_mask(x: &Fm, keep_mask: &Mask) -> Fm {
    let mut out = x.clone();
    for mut plane in out.outer_iter_mut() {
        Zip::from(&mut plane).and(keep_mask).for_each(|v, &k| {
            if k == 0.0 {
                *v = 0.0;
            }
        });
    }
    out
}

fn check_spatial(what: &str, x: &Fm, keep_mask: &Mask) -> Result<()> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if keep_mask.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "{what} is {h}x{w} but the keep-mask is {}x{}",
            keep_mask.shape()[0],
            keep_mask.shape()[1]
        )));
    }
    Ok(())
}

/// Input-level masking: with probability `policy.p`, every image channel is
/// multiplied by the keep-mask; otherwise the image passes through
/// untouched.
pub fn mask_input(
    image: &Fm,
    keep_mask: &Mask,
    policy: &MaskingPolicy,
    sample_id: &str,
    epoch: u64,
) -> Result<Fm> {
    if policy.mode != MaskingMode::InputLevel {
        return Err(Error::Config(format!(
            "mask_input called with a {} policy",
            policy.mode
        )));
    }
    check_spatial("image", image, keep_mask)?;
    if policy.draw_mask_decision(sample_id, epoch) {
        Ok(apply_keep_mask(image, keep_mask))
    } else {
        Ok(image.clone())
    }
}

/// Anatomy-level masking: the same draw and the same mask applied to all N
/// anatomy channels, between the anatomy encoder and the segmentor.
pub fn mask_anatomy(
    z: &Fm,
    keep_mask: &Mask,
    policy: &MaskingPolicy,
    sample_id: &str,
    epoch: u64,
) -> Result<Fm> {
    if policy.mode != MaskingMode::AnatomyLevel {
        return Err(Error::Config(format!(
            "mask_anatomy called with a {} policy",
            policy.mode
        )));
    }
    check_spatial("anatomy representation", z, keep_mask)?;
    if policy.draw_mask_decision(sample_id, epoch) {
        Ok(apply_keep_mask(z, keep_mask))
    } else {
        Ok(z.clone())
    }
}

//! Segmentation models and their losses.
//!
//! Three architectures share one training facade: a U-Net, a DeepLab-style
//! pyramid model, and a disentangled anatomy/modality model. [`SegModel`]
//! hides the differences behind `build` / `predict` / `train_step`, and in
//! particular routes a saliency keep-mask to the right place for each
//! architecture: multiplied into the input image for the image-to-mask
//! models, multiplied into the anatomy channels (before the segmentor
//! only) for the disentangled one.

pub mod deeplab;
pub mod losses;
pub mod sdnet;
pub mod unet;

pub use deeplab::{Deeplab, DeeplabBackbone};
pub use losses::{dice_loss, dice_loss_backward, SdnetLossWeights, SdnetLosses};
pub use sdnet::{SdNet, SdnetOutputs};
pub use unet::{Unet, UnetCore};

use ndarray::Array1;

use crate::data::Mask;
use crate::nn::{Fm, ParamsMut, ParamsRef};
use crate::rng;
use crate::{Error, Result};

/// Which architecture a config or checkpoint refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegModelKind {
    Unet,
    Deeplab,
    Sdnet,
}

impl std::str::FromStr for SegModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(SegModelKind::Unet),
            "deeplab" => Ok(SegModelKind::Deeplab),
            "sdnet" => Ok(SegModelKind::Sdnet),
            other => Err(Error::Config(format!(
                "unknown segmentation model '{other}' (expected 'unet', 'deeplab', or 'sdnet')"
            ))),
        }
    }
}

impl std::fmt::Display for SegModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SegModelKind::Unet => "unet",
            SegModelKind::Deeplab => "deeplab",
            SegModelKind::Sdnet => "sdnet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    pub depth: usize,
    pub width: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig { depth: 3, width: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DeeplabConfig {
    pub width: usize,
    pub rates: Vec<usize>,
    pub backbone: DeeplabBackbone,
}

impl Default for DeeplabConfig {
    fn default() -> Self {
        DeeplabConfig { width: 16, rates: vec![1, 6, 12, 18], backbone: DeeplabBackbone::Small }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SdnetConfig {
    pub n_channels: usize,
    pub latent_dim: usize,
    pub depth: usize,
    pub width: usize,
}

impl Default for SdnetConfig {
    fn default() -> Self {
        SdnetConfig { n_channels: 8, latent_dim: 8, depth: 3, width: 16 }
    }
}

/// Architecture selector plus its hyper-parameters, self-describing in
/// JSON/TOML via the `kind` field.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegConfig {
    Unet(UnetConfig),
    Deeplab(DeeplabConfig),
    Sdnet(SdnetConfig),
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig::Unet(UnetConfig::default())
    }
}

impl SegConfig {
    pub fn kind(&self) -> SegModelKind {
        match self {
            SegConfig::Unet(_) => SegModelKind::Unet,
            SegConfig::Deeplab(_) => SegModelKind::Deeplab,
            SegConfig::Sdnet(_) => SegModelKind::Sdnet,
        }
    }

    /// The default configuration for a given architecture.
    pub fn for_kind(kind: SegModelKind) -> Self {
        match kind {
            SegModelKind::Unet => SegConfig::Unet(UnetConfig::default()),
            SegModelKind::Deeplab => SegConfig::Deeplab(DeeplabConfig::default()),
            SegModelKind::Sdnet => SegConfig::Sdnet(SdnetConfig::default()),
        }
    }
}

/// Loss values from one [`SegModel::train_step`]. The single-objective
/// models report only `dice` (equal to `total`); the disentangled model
/// fills every field.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StepLosses {
    pub total: f64,
    pub dice: f64,
    pub reconstruction: Option<f64>,
    pub kl: Option<f64>,
    pub modality: Option<f64>,
}

/// A segmentation model of any supported architecture.
#[derive(Debug)]
pub enum SegModel {
    Unet(Unet),
    Deeplab(Deeplab),
    Sdnet(SdNet),
}

impl SegModel {
    /// Builds a freshly initialized model. Initialization draws from the
    /// dedicated stream `["seg", <kind>, "init"]` of `seed`, so different
    /// architectures under the same seed are independent.
    pub fn build(config: &SegConfig, seed: u64) -> Result<Self> {
        let kind = config.kind().to_string();
        let mut r = rng::stream(seed, &["seg", &kind, "init"]);
        Ok(match config {
            SegConfig::Unet(c) => SegModel::Unet(Unet::new(c.depth, c.width, &mut r)?),
            SegConfig::Deeplab(c) => {
                SegModel::Deeplab(Deeplab::new(c.width, &c.rates, c.backbone, &mut r)?)
            }
            SegConfig::Sdnet(c) => {
                SegModel::Sdnet(SdNet::new(c.n_channels, c.latent_dim, c.depth, c.width, &mut r)?)
            }
        })
    }

    pub fn kind(&self) -> SegModelKind {
        match self {
            SegModel::Unet(_) => SegModelKind::Unet,
            SegModel::Deeplab(_) => SegModelKind::Deeplab,
            SegModel::Sdnet(_) => SegModelKind::Sdnet,
        }
    }

    /// Input height/width must be a multiple of this.
    pub fn input_divisor(&self) -> usize {
        match self {
            SegModel::Unet(m) => m.core.input_divisor(),
            SegModel::Deeplab(m) => m.input_divisor(),
            SegModel::Sdnet(m) => m.input_divisor(),
        }
    }

    /// Foreground probability map for a (3, H, W) image.
    pub fn predict(&self, image: &Fm) -> Result<Mask> {
        match self {
            SegModel::Unet(m) => m.predict(image),
            SegModel::Deeplab(m) => m.predict(image),
            SegModel::Sdnet(m) => m.predict(image),
        }
    }

    /// One forward/backward pass accumulating gradients (the caller owns
    /// the optimizer and gradient zeroing).
    ///
    /// `keep` is the saliency keep-mask for this sample, already decided
    /// by the masking policy: the image-to-mask models multiply it into
    /// every image channel, the disentangled model into every anatomy
    /// channel ahead of its segmentor. `eps` is the modality
    /// reparameterization draw and `weights` the objective weights; both
    /// concern only the disentangled model and are ignored by the others.
    pub fn train_step(
        &mut self,
        image: &Fm,
        gt: &Mask,
        keep: Option<&Mask>,
        eps: Option<&Array1<f64>>,
        weights: &SdnetLossWeights,
    ) -> Result<StepLosses> {
        if gt.shape() != &image.shape()[1..] {
            return Err(Error::Shape(format!(
                "ground truth is {:?} but the image is {:?}",
                gt.shape(),
                &image.shape()[1..]
            )));
        }
        match self {
            SegModel::Unet(m) => {
                let x = masked_input(image, keep)?;
                let (pred, cache) = m.forward(&x)?;
                let dice = dice_loss(&pred, gt);
                let dmask = dice_loss_backward(&pred, gt);
                m.backward(&cache, &dmask);
                Ok(StepLosses {
                    total: dice,
                    dice,
                    reconstruction: None,
                    kl: None,
                    modality: None,
                })
            }
            SegModel::Deeplab(m) => {
                let x = masked_input(image, keep)?;
                let (pred, cache) = m.forward(&x)?;
                let dice = dice_loss(&pred, gt);
                let dmask = dice_loss_backward(&pred, gt);
                m.backward(&cache, &dmask);
                Ok(StepLosses {
                    total: dice,
                    dice,
                    reconstruction: None,
                    kl: None,
                    modality: None,
                })
            }
            SegModel::Sdnet(m) => {
                let (out, cache) = m.forward(image, keep, eps)?;
                let losses = m.train_backward(image, gt, &out, &cache, weights);
                Ok(StepLosses {
                    total: losses.total,
                    dice: losses.dice,
                    reconstruction: Some(losses.reconstruction),
                    kl: Some(losses.kl),
                    modality: Some(losses.modality),
                })
            }
        }
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        match self {
            SegModel::Unet(m) => m.params_mut(),
            SegModel::Deeplab(m) => m.params_mut(),
            SegModel::Sdnet(m) => m.params_mut(),
        }
    }

    pub fn params(&self) -> ParamsRef<'_> {
        match self {
            SegModel::Unet(m) => m.params(),
            SegModel::Deeplab(m) => m.params(),
            SegModel::Sdnet(m) => m.params(),
        }
    }

    pub fn num_params(&self) -> usize {
        crate::nn::count_params(&self.params())
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

fn masked_input(image: &Fm, keep: Option<&Mask>) -> Result<Fm> {
    match keep {
        Some(k) => {
            if k.shape() != &image.shape()[1..] {
                return Err(Error::Shape(format!(
                    "keep-mask is {:?} but the image is {:?}",
                    k.shape(),
                    &image.shape()[1..]
                )));
            }
            Ok(crate::augmentation::apply_keep_mask(image, k))
        }
        None => Ok(image.clone()),
    }
}

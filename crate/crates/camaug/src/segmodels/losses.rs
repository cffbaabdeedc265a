//! Segmentation and disentanglement losses with analytic gradients.

use ndarray::Array1;

use crate::data::Mask;
use crate::nn::Fm;

/// Smoothing constant in the Dice ratio; keeps empty-vs-empty defined and
/// gradients bounded.
pub const DICE_EPS: f64 = 1.0;

/// Soft Dice loss: `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss(pred: &Mask, gt: &Mask) -> f64 {
    assert_eq!(pred.raw_dim(), gt.raw_dim(), "dice operands must share a shape");
    let inter: f64 = pred.iter().zip(gt.iter()).map(|(p, g)| p * g).sum();
    let total = pred.sum() + gt.sum();
    1.0 - (2.0 * inter + DICE_EPS) / (total + DICE_EPS)
}

/// d(dice_loss)/d(pred), elementwise. With numerator `n = 2*sum(p*g) + eps`
/// and denominator `d = sum(p) + sum(g) + eps`, the derivative at pixel i is
/// `-(2*g_i*d - n) / d^2`.
pub fn dice_loss_backward(pred: &Mask, gt: &Mask) -> Mask {
    assert_eq!(pred.raw_dim(), gt.raw_dim(), "dice operands must share a shape");
    let inter: f64 = pred.iter().zip(gt.iter()).map(|(p, g)| p * g).sum();
    let n = 2.0 * inter + DICE_EPS;
    let d = pred.sum() + gt.sum() + DICE_EPS;
    gt.mapv(|g| -(2.0 * g * d - n) / (d * d))
}

/// Mean absolute error over all elements.
pub fn l1_loss(a: &Fm, b: &Fm) -> f64 {
    assert_eq!(a.raw_dim(), b.raw_dim(), "l1 operands must share a shape");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// d(l1_loss)/d(a): sign(a - b) / len. The subgradient at a == b is 0.
pub fn l1_loss_backward(a: &Fm, b: &Fm) -> Fm {
    let n = a.len() as f64;
    let mut out = a.clone();
    out.zip_mut_with(b, |x, y| {
        *x = if *x > *y {
            1.0 / n
        } else if *x < *y {
            -1.0 / n
        } else {
            0.0
        }
    });
    out
}

/// KL divergence of N(mu, exp(logvar)) against the unit Gaussian:
/// `-0.5 * sum(1 + logvar - mu^2 - exp(logvar))`.
pub fn kl_divergence(mu: &Array1<f64>, logvar: &Array1<f64>) -> f64 {
    assert_eq!(mu.len(), logvar.len());
    -0.5 * mu
        .iter()
        .zip(logvar.iter())
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Gradients of [`kl_divergence`]: d/d(mu) = mu, d/d(logvar) =
/// 0.5 * (exp(logvar) - 1).
pub fn kl_divergence_backward(mu: &Array1<f64>, logvar: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    (mu.clone(), logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0)))
}

/// Weights for the disentangled model's four training terms. The reference
/// architecture leaves them unspecified; these defaults are exposed in
/// config and reports.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SdnetLossWeights {
    pub dice: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub modality: f64,
}

impl Default for SdnetLossWeights {
    fn default() -> Self {
        SdnetLossWeights { dice: 10.0, reconstruction: 1.0, kl: 0.01, modality: 1.0 }
    }
}

/// The four component values plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdnetLosses {
    pub dice: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub modality: f64,
    pub total: f64,
}

impl SdnetLosses {
    pub fn weighted(
        dice: f64,
        reconstruction: f64,
        kl: f64,
        modality: f64,
        w: &SdnetLossWeights,
    ) -> Self {
        SdnetLosses {
            dice,
            reconstruction,
            kl,
            modality,
            total: w.dice * dice
                + w.reconstruction * reconstruction
                + w.kl * kl
                + w.modality * modality,
        }
    }
}

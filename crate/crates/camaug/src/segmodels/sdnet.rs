//! Disentangled segmentation model: a spatial anatomy factor and a global
//! modality factor, trained with segmentation, reconstruction, prior, and
//! modality-consistency objectives.
//!
//! Four sub-networks cooperate:
//! - the anatomy encoder F (a U-Net trunk + channel softmax) maps the image
//!   to N spatial anatomy channels `z` that sum to one per pixel;
//! - the modality encoder E maps `(z, image)` to a Gaussian posterior
//!   (mu, logvar) over a low-dimensional style vector `s`;
//! - the decoder D reconstructs the image from `(z, s)`;
//! - the segmentor S predicts the mask from `z` alone.
//!
//! Saliency-driven augmentation plugs in between F and S: a keep-mask
//! zeroes anatomy pixels before segmentation *only*, so D and E always see
//! the full anatomy and the reconstruction objective stays intact.
//!
//! S is deliberately norm-free (two 3x3 convs and a 1x1 head), so a masked
//! anatomy pixel can influence predictions only within a 2-pixel
//! Chebyshev radius; normalization layers would leak it everywhere.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha12Rng;

use crate::data::Mask;
use crate::nn::blocks::{ConvNorm, ConvNormCache};
use crate::nn::pool::{global_avg_pool, global_avg_pool_backward};
use crate::nn::{
    act, concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, Conv2d,
    Fm, Linear, ParamsMut, ParamsRef,
};
use crate::{Error, Result};

use super::losses::{
    dice_loss, dice_loss_backward, kl_divergence, kl_divergence_backward, l1_loss,
    l1_loss_backward, SdnetLossWeights, SdnetLosses,
};
use super::unet::{UnetCore, UnetCoreCache};

/// Convolutional encoder from `(anatomy, image)` to a Gaussian posterior
/// over the modality vector.
#[derive(Debug)]
pub struct ModalityEncoder {
    cn1: ConvNorm,
    cn2: ConvNorm,
    fc: Linear,
    latent: usize,
}

#[derive(Debug)]
pub struct ModalityCache {
    c1: ConvNormCache,
    z1: Fm,
    c2: ConvNormCache,
    z2: Fm,
    pooled: Array1<f64>,
    hw2: (usize, usize),
}

impl ModalityEncoder {
    fn new(in_ch: usize, width: usize, latent: usize, rng: &mut ChaCha12Rng) -> Self {
        ModalityEncoder {
            cn1: ConvNorm::new(in_ch, width, 3, 2, 1, rng),
            cn2: ConvNorm::new(width, 2 * width, 3, 2, 1, rng),
            fc: Linear::new(2 * width, 2 * latent, rng),
            latent,
        }
    }

    fn forward(&self, x: &Fm) -> (Array1<f64>, Array1<f64>, ModalityCache) {
        let (z1, c1) = self.cn1.forward(x);
        let a1 = relu(&z1);
        let (z2, c2) = self.cn2.forward(&a1);
        let a2 = relu(&z2);
        let hw2 = (a2.shape()[1], a2.shape()[2]);
        let pooled = global_avg_pool(&a2);
        let out = self.fc.forward(&pooled);
        let mu = out.slice(ndarray::s![..self.latent]).to_owned();
        let logvar = out.slice(ndarray::s![self.latent..]).to_owned();
        (mu, logvar, ModalityCache { c1, z1, c2, z2, pooled, hw2 })
    }

    /// Accumulates parameter gradients and returns dL/d(input).
    fn backward(&mut self, cache: &ModalityCache, dmu: &Array1<f64>, dlogvar: &Array1<f64>) -> Fm {
        let mut dout = Array1::zeros(2 * self.latent);
        dout.slice_mut(ndarray::s![..self.latent]).assign(dmu);
        dout.slice_mut(ndarray::s![self.latent..]).assign(dlogvar);
        let dpooled = self.fc.backward(&cache.pooled, &dout);
        let da2 = global_avg_pool_backward(&dpooled, cache.hw2.0, cache.hw2.1);
        let dz2 = relu_backward(&cache.z2, &da2);
        let da1 = self.cn2.backward(&cache.c2, &dz2);
        let dz1 = relu_backward(&cache.z1, &da1);
        self.cn1.backward(&cache.c1, &dz1)
    }

    fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("cn1", self.cn1.params_mut());
        out.extend(crate::nn::with_prefix("cn2", self.cn2.params_mut()));
        out.extend(crate::nn::with_prefix("fc", self.fc.params_mut()));
        out
    }

    fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("cn1", self.cn1.params());
        out.extend(crate::nn::with_prefix_ref("cn2", self.cn2.params()));
        out.extend(crate::nn::with_prefix_ref("fc", self.fc.params()));
        out
    }
}

/// Reconstructs the image from anatomy channels and a spatially tiled
/// modality vector.
#[derive(Debug)]
pub struct SdnetDecoder {
    cn1: ConvNorm,
    cn2: ConvNorm,
    head: Conv2d,
    latent: usize,
}

#[derive(Debug)]
pub struct DecoderCache {
    c1: ConvNormCache,
    z1: Fm,
    c2: ConvNormCache,
    z2: Fm,
    head_in: Fm,
    probs: Fm,
}

impl SdnetDecoder {
    fn new(n_ch: usize, width: usize, latent: usize, rng: &mut ChaCha12Rng) -> Self {
        SdnetDecoder {
            cn1: ConvNorm::new(n_ch + latent, width, 3, 1, 1, rng),
            cn2: ConvNorm::new(width, width, 3, 1, 1, rng),
            head: Conv2d::new(width, 3, 1, 1, 0, rng),
            latent,
        }
    }

    fn forward(&self, z: &Fm, s: &Array1<f64>) -> (Fm, DecoderCache) {
        let (h, w) = (z.shape()[1], z.shape()[2]);
        let tiled = Fm::from_shape_fn((self.latent, h, w), |(c, _, _)| s[c]);
        let cat = concat_channels(z, &tiled);
        let (z1, c1) = self.cn1.forward(&cat);
        let a1 = relu(&z1);
        let (z2, c2) = self.cn2.forward(&a1);
        let a2 = relu(&z2);
        let logits = self.head.forward(&a2);
        let probs = sigmoid(&logits);
        (probs.clone(), DecoderCache { c1, z1, c2, z2, head_in: a2, probs })
    }

    /// Returns (dL/dz, dL/ds).
    fn backward(&mut self, cache: &DecoderCache, drecon: &Fm) -> (Fm, Array1<f64>) {
        let dlogits = sigmoid_backward(&cache.probs, drecon);
        let da2 = self.head.backward(&cache.head_in, &dlogits);
        let dz2 = relu_backward(&cache.z2, &da2);
        let da1 = self.cn2.backward(&cache.c2, &dz2);
        let dz1 = relu_backward(&cache.z1, &da1);
        let dcat = self.cn1.backward(&cache.c1, &dz1);
        let n_ch = dcat.shape()[0] - self.latent;
        let (dz, dtiled) = split_channels(&dcat, n_ch);
        let ds = Array1::from_iter(dtiled.axis_iter(Axis(0)).map(|plane| plane.sum()));
        (dz, ds)
    }

    fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("cn1", self.cn1.params_mut());
        out.extend(crate::nn::with_prefix("cn2", self.cn2.params_mut()));
        out.extend(crate::nn::with_prefix("head", self.head.params_mut()));
        out
    }

    fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("cn1", self.cn1.params());
        out.extend(crate::nn::with_prefix_ref("cn2", self.cn2.params()));
        out.extend(crate::nn::with_prefix_ref("head", self.head.params()));
        out
    }
}

/// Norm-free mask predictor over anatomy channels. Receptive field is a
/// 5x5 box (two 3x3 convs), which bounds how far a masked pixel can reach.
#[derive(Debug)]
pub struct Segmentor {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
}

#[derive(Debug)]
pub struct SegmentorCache {
    x: Fm,
    z1: Fm,
    a1: Fm,
    z2: Fm,
    a2: Fm,
    probs: Fm,
}

impl Segmentor {
    fn new(n_ch: usize, width: usize, rng: &mut ChaCha12Rng) -> Self {
        Segmentor {
            conv1: Conv2d::new(n_ch, width, 3, 1, 1, rng),
            conv2: Conv2d::new(width, width, 3, 1, 1, rng),
            head: Conv2d::new(width, 1, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, x: &Fm) -> (Mask, SegmentorCache) {
        let z1 = self.conv1.forward(x);
        let a1 = relu(&z1);
        let z2 = self.conv2.forward(&a1);
        let a2 = relu(&z2);
        let logits = self.head.forward(&a2);
        let probs = sigmoid(&logits);
        let mask = probs.index_axis(Axis(0), 0).to_owned();
        (mask, SegmentorCache { x: x.clone(), z1, a1, z2, a2, probs })
    }

    fn backward(&mut self, cache: &SegmentorCache, dmask: &Mask) -> Fm {
        let dprobs = dmask.clone().insert_axis(Axis(0));
        let dlogits = sigmoid_backward(&cache.probs, &dprobs);
        let da2 = self.head.backward(&cache.a2, &dlogits);
        let dz2 = relu_backward(&cache.z2, &da2);
        let da1 = self.conv2.backward(&cache.a1, &dz2);
        let dz1 = relu_backward(&cache.z1, &da1);
        self.conv1.backward(&cache.x, &dz1)
    }

    fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("conv1", self.conv1.params_mut());
        out.extend(crate::nn::with_prefix("conv2", self.conv2.params_mut()));
        out.extend(crate::nn::with_prefix("head", self.head.params_mut()));
        out
    }

    fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("conv1", self.conv1.params());
        out.extend(crate::nn::with_prefix_ref("conv2", self.conv2.params()));
        out.extend(crate::nn::with_prefix_ref("head", self.head.params()));
        out
    }
}

/// The full disentangled model.
#[derive(Debug)]
pub struct SdNet {
    pub n_channels: usize,
    pub latent_dim: usize,
    pub anatomy: UnetCore,
    pub modality: ModalityEncoder,
    pub decoder: SdnetDecoder,
    pub segmentor: Segmentor,
}

/// Everything the forward pass produces.
#[derive(Debug)]
pub struct SdnetOutputs {
    pub segmentation: Mask,
    pub reconstruction: Fm,
    /// Softmaxed anatomy channels (unmasked).
    pub anatomy: Fm,
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
    /// Sampled (or posterior-mean) modality vector actually fed to D.
    pub s: Array1<f64>,
}

#[derive(Debug)]
pub struct SdnetCache {
    core: UnetCoreCache,
    z: Fm,
    keep: Option<Mask>,
    seg: SegmentorCache,
    es: ModalityCache,
    dec: DecoderCache,
}

impl SdNet {
    pub fn new(
        n_channels: usize,
        latent_dim: usize,
        depth: usize,
        width: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if n_channels < 2 {
            return Err(Error::Config(format!(
                "anatomy needs at least 2 channels for the softmax to carry information, got {n_channels}"
            )));
        }
        if latent_dim < 1 {
            return Err(Error::Config("modality latent dimension must be positive".into()));
        }
        Ok(SdNet {
            n_channels,
            latent_dim,
            anatomy: UnetCore::new(3, n_channels, depth, width, rng)?,
            modality: ModalityEncoder::new(n_channels + 3, width, latent_dim, rng),
            decoder: SdnetDecoder::new(n_channels, width, latent_dim, rng),
            segmentor: Segmentor::new(n_channels, width, rng),
        })
    }

    pub fn input_divisor(&self) -> usize {
        self.anatomy.input_divisor()
    }

    /// Runs the full model. `keep` (1 = keep, 0 = blocked) is applied to
    /// every anatomy channel before the segmentor and nowhere else; `eps`
    /// draws the modality sample via the reparameterization
    /// `s = mu + exp(logvar / 2) * eps`, while `None` uses the posterior
    /// mean (inference).
    pub fn forward(
        &self,
        x: &Fm,
        keep: Option<&Mask>,
        eps: Option<&Array1<f64>>,
    ) -> Result<(SdnetOutputs, SdnetCache)> {
        if let Some(e) = eps {
            if e.len() != self.latent_dim {
                return Err(Error::Shape(format!(
                    "modality noise has {} entries, model expects {}",
                    e.len(),
                    self.latent_dim
                )));
            }
        }
        if let Some(k) = keep {
            if k.shape() != &x.shape()[1..] {
                return Err(Error::Shape(format!(
                    "keep-mask is {:?} but the image is {:?}",
                    k.shape(),
                    &x.shape()[1..]
                )));
            }
        }
        let (logits, core) = self.anatomy.forward(x)?;
        let z = act::softmax_channels(&logits);
        let z_seg = match keep {
            Some(k) => crate::augmentation::apply_keep_mask(&z, k),
            None => z.clone(),
        };
        let (segmentation, seg) = self.segmentor.forward(&z_seg);
        let es_in = concat_channels(&z, x);
        let (mu, logvar, es) = self.modality.forward(&es_in);
        let s = match eps {
            Some(e) => &mu + &(logvar.mapv(|lv| (0.5 * lv).exp()) * e),
            None => mu.clone(),
        };
        let (reconstruction, dec) = self.decoder.forward(&z, &s);
        Ok((
            SdnetOutputs { segmentation, reconstruction, anatomy: z.clone(), mu, logvar, s },
            SdnetCache { core, z, keep: keep.cloned(), seg, es, dec },
        ))
    }

    /// Posterior-mean segmentation.
    pub fn predict(&self, x: &Fm) -> Result<Mask> {
        Ok(self.forward(x, None, None)?.0.segmentation)
    }

    /// Modality posterior for arbitrary (anatomy, image-like) inputs.
    /// Exposed for the modality-consistency objective, which re-encodes
    /// the reconstruction.
    pub fn encode_modality(&self, anatomy: &Fm, image: &Fm) -> (Array1<f64>, Array1<f64>) {
        let (mu, logvar, _) = self.modality.forward(&concat_channels(anatomy, image));
        (mu, logvar)
    }

    /// Accumulates gradients of the weighted four-term objective.
    ///
    /// The modality-consistency term re-encodes the reconstruction and
    /// penalizes `mean |mu' - s|`; its gradient is taken with respect to
    /// the encoder parameters only, treating the re-encoded inputs
    /// (anatomy, reconstruction) and the target `s` as constants. The
    /// dice-path gradient into the anatomy respects the keep-mask: blocked
    /// pixels pass nothing back.
    pub fn train_backward(
        &mut self,
        x: &Fm,
        gt: &Mask,
        outputs: &SdnetOutputs,
        cache: &SdnetCache,
        weights: &SdnetLossWeights,
    ) -> SdnetLosses {
        // Segmentation term.
        let dice = dice_loss(&outputs.segmentation, gt);
        let dseg = dice_loss_backward(&outputs.segmentation, gt).mapv(|v| v * weights.dice);
        let dz_seg = self.segmentor.backward(&cache.seg, &dseg);
        let dz_from_s = match &cache.keep {
            Some(k) => {
                let mut gated = dz_seg;
                for mut plane in gated.outer_iter_mut() {
                    plane.zip_mut_with(k, |g, &keep| {
                        if keep == 0.0 {
                            *g = 0.0;
                        }
                    });
                }
                gated
            }
            None => dz_seg,
        };

        // Reconstruction term.
        let reconstruction = l1_loss(&outputs.reconstruction, x);
        let drecon =
            l1_loss_backward(&outputs.reconstruction, x).mapv(|v| v * weights.reconstruction);
        let (dz_dec, ds) = self.decoder.backward(&cache.dec, &drecon);

        // Prior term.
        let kl = kl_divergence(&outputs.mu, &outputs.logvar);
        let (dmu_kl, dlv_kl) = kl_divergence_backward(&outputs.mu, &outputs.logvar);

        // Reparameterization: s = mu + exp(logvar/2) * eps, so ds/dmu = 1
        // and ds/dlogvar = (s - mu) / 2 (zero when s collapsed to mu).
        let dmu = &(dmu_kl * weights.kl) + &ds;
        let dlv = &(dlv_kl * weights.kl)
            + &(&ds * &(&outputs.s - &outputs.mu).mapv(|v| 0.5 * v));
        let des_in = self.modality.backward(&cache.es, &dmu, &dlv);
        let (dz_es, _dx_es) = split_channels(&des_in, self.n_channels);

        // Modality-consistency term: re-encode the reconstruction with
        // stop-gradients on everything but the encoder parameters.
        let (mu2, lv2, es2) = self.modality.forward(&concat_channels(
            &outputs.anatomy,
            &outputs.reconstruction,
        ));
        let modality =
            (&mu2 - &outputs.s).mapv(f64::abs).sum() / self.latent_dim as f64;
        let dmu2 = (&mu2 - &outputs.s).mapv(|d| {
            weights.modality * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }
                / self.latent_dim as f64
        });
        let _ = self.modality.backward(&es2, &dmu2, &Array1::zeros(lv2.len()));

        // Everything meets at the anatomy.
        let dz = dz_from_s + &dz_dec + &dz_es;
        let dlogits = act::softmax_channels_backward(&cache.z, &dz);
        self.anatomy.backward(&cache.core, &dlogits);

        SdnetLosses::weighted(dice, reconstruction, kl, modality, weights)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("anatomy", self.anatomy.params_mut());
        out.extend(crate::nn::with_prefix("modality", self.modality.params_mut()));
        out.extend(crate::nn::with_prefix("decoder", self.decoder.params_mut()));
        out.extend(crate::nn::with_prefix("segmentor", self.segmentor.params_mut()));
        out
    }

    pub fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("anatomy", self.anatomy.params());
        out.extend(crate::nn::with_prefix_ref("modality", self.modality.params()));
        out.extend(crate::nn::with_prefix_ref("decoder", self.decoder.params()));
        out.extend(crate::nn::with_prefix_ref("segmentor", self.segmentor.params()));
        out
    }

    pub fn num_params(&self) -> usize {
        crate::nn::count_params(&self.params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::he_normal;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn random_image(seed: u64) -> Fm {
        let mut r = rng(seed);
        he_normal(&[3, 8, 8], 4, &mut r)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .mapv(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0))
    }

    fn fixture() -> (SdNet, Fm, Mask, Array1<f64>) {
        let model = SdNet::new(4, 3, 2, 2, &mut rng(7)).unwrap();
        let x = random_image(8);
        let gt = {
            let mut r = rng(9);
            Mask::from_shape_fn((8, 8), |_| {
                use rand::Rng;
                r.random_bool(0.4) as u8 as f64
            })
        };
        let eps = ndarray::arr1(&[0.3, -0.5, 0.8]);
        (model, x, gt, eps)
    }

    fn grad_of(model: &SdNet, name: &str, idx: usize) -> f64 {
        let params = model.params();
        let (_, p) = params
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter {name} not found"));
        p.grad.as_slice().unwrap()[idx]
    }

    fn nudge(model: &mut SdNet, name: &str, idx: usize, delta: f64) {
        let mut params = model.params_mut();
        let (_, p) = params.iter_mut().find(|(n, _)| n == name).unwrap();
        p.val.as_slice_mut().unwrap()[idx] += delta;
    }

    /// Central finite difference of `loss` w.r.t. one named scalar.
    fn fd(model: &mut SdNet, name: &str, idx: usize, mut loss: impl FnMut(&SdNet) -> f64) -> f64 {
        let eps = 1e-5;
        nudge(model, name, idx, eps);
        let lp = loss(model);
        nudge(model, name, idx, -2.0 * eps);
        let lm = loss(model);
        nudge(model, name, idx, eps);
        (lp - lm) / (2.0 * eps)
    }

    fn only(dice: f64, recon: f64, kl: f64, modality: f64) -> SdnetLossWeights {
        SdnetLossWeights { dice, reconstruction: recon, kl, modality }
    }

    #[test]
    fn anatomy_channels_are_a_softmax_partition() {
        let (model, x, _, _) = fixture();
        let (out, _) = model.forward(&x, None, None).unwrap();
        assert_eq!(out.anatomy.shape(), &[4, 8, 8]);
        for y in 0..8 {
            for xx in 0..8 {
                let sum: f64 = (0..4).map(|c| out.anatomy[[c, y, xx]]).sum();
                assert!((sum - 1.0).abs() < 1e-12, "channel mass at ({y},{xx}) = {sum}");
            }
        }
        assert!(out.anatomy.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out.segmentation.shape(), &[8, 8]);
        assert_eq!(out.reconstruction.shape(), &[3, 8, 8]);
        assert!(out.reconstruction.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn posterior_mean_is_used_without_noise_and_reparameterization_with() {
        let (model, x, _, eps) = fixture();
        let (plain, _) = model.forward(&x, None, None).unwrap();
        assert_eq!(plain.s, plain.mu, "without noise the modality sample is the mean");
        let (noisy, _) = model.forward(&x, None, Some(&eps)).unwrap();
        let want = &noisy.mu + &(noisy.logvar.mapv(|lv| (0.5 * lv).exp()) * &eps);
        for i in 0..3 {
            assert!((noisy.s[i] - want[i]).abs() < 1e-15, "reparameterized draw at {i}");
        }
        assert_eq!(plain.mu, noisy.mu, "noise must not change the posterior itself");
    }

    #[test]
    fn rejects_degenerate_configurations_and_mismatched_inputs() {
        assert!(matches!(SdNet::new(1, 3, 2, 2, &mut rng(0)), Err(Error::Config(_))));
        assert!(matches!(SdNet::new(4, 0, 2, 2, &mut rng(0)), Err(Error::Config(_))));
        let (model, x, _, _) = fixture();
        let bad_eps = ndarray::arr1(&[0.1, 0.2]);
        assert!(matches!(
            model.forward(&x, None, Some(&bad_eps)),
            Err(Error::Shape(_))
        ));
        let bad_keep = Mask::ones((4, 4));
        assert!(matches!(
            model.forward(&x, Some(&bad_keep), None),
            Err(Error::Shape(_))
        ));
    }

    /// The wiring contract of anatomy-level masking: blocking pixels
    /// before the segmentor must leave every other head untouched.
    #[test]
    fn masking_the_segmentor_input_leaves_reconstruction_bit_identical() {
        let (model, x, _, eps) = fixture();
        let keep = {
            let mut r = rng(20);
            Mask::from_shape_fn((8, 8), |_| {
                use rand::Rng;
                r.random_bool(0.5) as u8 as f64
            })
        };
        let (plain, _) = model.forward(&x, None, Some(&eps)).unwrap();
        let (masked, _) = model.forward(&x, Some(&keep), Some(&eps)).unwrap();
        assert!(
            plain
                .reconstruction
                .iter()
                .zip(masked.reconstruction.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "reconstruction must not see the keep-mask"
        );
        assert_eq!(plain.mu, masked.mu);
        assert_eq!(plain.logvar, masked.logvar);
        assert_eq!(plain.anatomy, masked.anatomy);
        assert_ne!(
            plain.segmentation, masked.segmentation,
            "the segmentor is the one head that must feel the mask"
        );
    }

    /// A masked anatomy pixel can only affect predictions within the
    /// segmentor's receptive field (two 3x3 convs = Chebyshev radius 2).
    #[test]
    fn segmentor_disturbance_stays_within_a_two_pixel_radius() {
        let (model, x, _, _) = fixture();
        let (out, _) = model.forward(&x, None, None).unwrap();
        let z = out.anatomy;
        let (base, _) = model.segmentor.forward(&z);
        let mut z2 = z.clone();
        let (py, px) = (4usize, 3usize);
        for c in 0..4 {
            z2[[c, py, px]] = 0.0;
        }
        let (poked, _) = model.segmentor.forward(&z2);
        for y in 0..8 {
            for xx in 0..8 {
                let d = (poked[[y, xx]] - base[[y, xx]]).abs();
                let radius =
                    (y as isize - py as isize).abs().max((xx as isize - px as isize).abs());
                if radius > 2 {
                    assert_eq!(
                        d, 0.0,
                        "pixel ({y},{xx}) at radius {radius} moved by {d}"
                    );
                }
            }
        }
        let moved = (0..8).any(|y| (0..8).any(|xx| poked[[y, xx]] != base[[y, xx]]));
        assert!(moved, "zeroing an anatomy pixel should move nearby predictions");
    }

    /// Which loss reaches which sub-network: dice -> {segmentor, anatomy},
    /// reconstruction -> {decoder, modality, anatomy}, KL -> {modality,
    /// anatomy}, modality-consistency -> {modality} only.
    #[test]
    fn each_loss_term_reaches_exactly_its_sub_networks() {
        let cases: [(SdnetLossWeights, [bool; 4]); 4] = [
            // [anatomy, modality, decoder, segmentor]
            (only(1.0, 0.0, 0.0, 0.0), [true, false, false, true]),
            (only(0.0, 1.0, 0.0, 0.0), [true, true, true, false]),
            (only(0.0, 0.0, 1.0, 0.0), [true, true, false, false]),
            (only(0.0, 0.0, 0.0, 1.0), [false, true, false, false]),
        ];
        for (weights, expect) in cases {
            let (mut model, x, gt, eps) = fixture();
            let (out, cache) = model.forward(&x, None, Some(&eps)).unwrap();
            model.train_backward(&x, &gt, &out, &cache, &weights);
            for (prefix, want) in
                ["anatomy", "modality", "decoder", "segmentor"].iter().zip(expect)
            {
                let total: f64 = model
                    .params()
                    .iter()
                    .filter(|(n, _)| n.starts_with(prefix))
                    .map(|(_, p)| p.grad.iter().map(|g| g.abs()).sum::<f64>())
                    .sum();
                assert_eq!(
                    total > 0.0,
                    want,
                    "weights {weights:?}: {prefix} gradient mass = {total}"
                );
            }
        }
    }

    #[test]
    fn dice_path_gradients_match_finite_differences() {
        let (mut model, x, gt, eps) = fixture();
        let (out, cache) = model.forward(&x, None, Some(&eps)).unwrap();
        model.train_backward(&x, &gt, &out, &cache, &only(1.0, 0.0, 0.0, 0.0));
        let eps_v = eps.clone();
        let loss = move |m: &SdNet| {
            let (o, _) = m.forward(&x, None, Some(&eps_v)).unwrap();
            dice_loss(&o.segmentation, &gt)
        };
        for (name, idx) in [
            ("anatomy.enc1.cn1.conv.w", 0usize),
            ("anatomy.head.w", 2),
            ("segmentor.conv1.w", 1),
            ("segmentor.head.w", 0),
            ("segmentor.head.b", 0),
        ] {
            let analytic = grad_of(&model, name, idx);
            let numeric = fd(&mut model, name, idx, &loss);
            assert!(
                (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()),
                "{name}[{idx}]: fd={numeric} analytic={analytic}"
            );
        }
    }

    #[test]
    fn reconstruction_path_gradients_match_finite_differences() {
        let (mut model, x, gt, eps) = fixture();
        let (out, cache) = model.forward(&x, None, Some(&eps)).unwrap();
        model.train_backward(&x, &gt, &out, &cache, &only(0.0, 1.0, 0.0, 0.0));
        let eps_v = eps.clone();
        let xc = x.clone();
        let loss = move |m: &SdNet| {
            let (o, _) = m.forward(&xc, None, Some(&eps_v)).unwrap();
            l1_loss(&o.reconstruction, &xc)
        };
        for (name, idx) in [
            ("decoder.cn1.conv.w", 2usize),
            ("decoder.head.w", 1),
            ("decoder.head.b", 0),
            ("modality.fc.w", 1),
            ("modality.cn1.conv.w", 0),
            ("anatomy.enc1.cn1.conv.w", 3),
        ] {
            let analytic = grad_of(&model, name, idx);
            let numeric = fd(&mut model, name, idx, &loss);
            assert!(
                (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()),
                "{name}[{idx}]: fd={numeric} analytic={analytic}"
            );
        }
    }

    #[test]
    fn kl_path_gradients_match_finite_differences() {
        let (mut model, x, gt, eps) = fixture();
        let (out, cache) = model.forward(&x, None, Some(&eps)).unwrap();
        model.train_backward(&x, &gt, &out, &cache, &only(0.0, 0.0, 1.0, 0.0));
        let eps_v = eps.clone();
        let xc = x.clone();
        let loss = move |m: &SdNet| {
            let (o, _) = m.forward(&xc, None, Some(&eps_v)).unwrap();
            kl_divergence(&o.mu, &o.logvar)
        };
        for (name, idx) in [
            ("modality.fc.w", 0usize),
            ("modality.fc.b", 1),
            ("modality.cn2.conv.w", 2),
            ("anatomy.enc1.cn1.conv.w", 1),
        ] {
            let analytic = grad_of(&model, name, idx);
            let numeric = fd(&mut model, name, idx, &loss);
            assert!(
                (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()),
                "{name}[{idx}]: fd={numeric} analytic={analytic}"
            );
        }
    }

    /// The consistency term treats its inputs and target as constants, so
    /// the finite-difference oracle must too: freeze (anatomy,
    /// reconstruction, s) from the unperturbed model and re-encode with
    /// nudged encoder parameters.
    #[test]
    fn modality_consistency_gradients_match_finite_differences_at_frozen_inputs() {
        let (mut model, x, gt, eps) = fixture();
        let (out, cache) = model.forward(&x, None, Some(&eps)).unwrap();
        model.train_backward(&x, &gt, &out, &cache, &only(0.0, 0.0, 0.0, 1.0));
        let z0 = out.anatomy.clone();
        let recon0 = out.reconstruction.clone();
        let s0 = out.s.clone();
        let loss = move |m: &SdNet| {
            let (mu2, _) = m.encode_modality(&z0, &recon0);
            (&mu2 - &s0).mapv(f64::abs).sum() / 3.0
        };
        for (name, idx) in
            [("modality.fc.w", 2usize), ("modality.cn1.conv.w", 1), ("modality.fc.b", 0)]
        {
            let analytic = grad_of(&model, name, idx);
            let numeric = fd(&mut model, name, idx, &loss);
            assert!(
                (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()),
                "{name}[{idx}]: fd={numeric} analytic={analytic}"
            );
        }
    }

    /// Blocked pixels must contribute nothing to the dice gradient: with a
    /// keep-mask applied, the anatomy gradient from the segmentation path
    /// is zero at blocked locations.
    #[test]
    fn blocked_pixels_pass_no_dice_gradient_into_the_anatomy() {
        let (mut model, x, gt, eps) = fixture();
        let keep = Mask::from_shape_fn((8, 8), |(y, _)| (y < 4) as u8 as f64);
        let (out, cache) = model.forward(&x, Some(&keep), Some(&eps)).unwrap();
        model.train_backward(&x, &gt, &out, &cache, &only(1.0, 0.0, 0.0, 0.0));
        // Finite difference through the *masked* forward on a parameter
        // still matches (the mask is part of the function).
        let eps_v = eps.clone();
        let keep_c = keep.clone();
        let xc = x.clone();
        let loss = move |m: &SdNet| {
            let (o, _) = m.forward(&xc, Some(&keep_c), Some(&eps_v)).unwrap();
            dice_loss(&o.segmentation, &gt)
        };
        for (name, idx) in [("anatomy.head.w", 0usize), ("segmentor.conv2.w", 3)] {
            let analytic = grad_of(&model, name, idx);
            let numeric = fd(&mut model, name, idx, &loss);
            assert!(
                (numeric - analytic).abs() < 1e-6 * (1.0 + numeric.abs()),
                "{name}[{idx}]: fd={numeric} analytic={analytic}"
            );
        }
    }

    #[test]
    fn reported_losses_match_their_standalone_evaluations() {
        let (mut model, x, gt, eps) = fixture();
        let w = SdnetLossWeights::default();
        let (out, cache) = model.forward(&x, None, Some(&eps)).unwrap();
        let losses = model.train_backward(&x, &gt, &out, &cache, &w);
        assert!((losses.dice - dice_loss(&out.segmentation, &gt)).abs() < 1e-15);
        assert!(
            (losses.reconstruction - l1_loss(&out.reconstruction, &x)).abs() < 1e-15
        );
        assert!((losses.kl - kl_divergence(&out.mu, &out.logvar)).abs() < 1e-15);
        let (mu2, _) = model.encode_modality(&out.anatomy, &out.reconstruction);
        let want_mod = (&mu2 - &out.s).mapv(f64::abs).sum() / 3.0;
        assert!((losses.modality - want_mod).abs() < 1e-15);
        let want_total = 10.0 * losses.dice
            + losses.reconstruction
            + 0.01 * losses.kl
            + losses.modality;
        assert!((losses.total - want_total).abs() < 1e-12);
    }
}

//! U-Net: a symmetric encoder-decoder with skip connections.
//!
//! [`UnetCore`] produces raw logits with a configurable channel count so it
//! can serve both as the binary segmentation network (sigmoid head, via
//! [`Unet`]) and as the anatomy encoder of the disentangled model (channel
//! softmax, applied by the caller).

use ndarray::Axis;
use rand_chacha::ChaCha12Rng;

use crate::data::Mask;
use crate::nn::blocks::{ConvNorm, ConvNormCache};
use crate::nn::pool::{max_pool2, max_pool2_backward, upsample_nearest2, upsample_nearest2_backward};
use crate::nn::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, Conv2d, Fm,
    ParamsMut, ParamsRef,
};
use crate::{Error, Result};

/// Two 3x3 conv-norm-relu stages at constant resolution.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub cn1: ConvNorm,
    pub cn2: ConvNorm,
}

#[derive(Debug, Clone)]
pub struct DoubleConvCache {
    c1: ConvNormCache,
    z1: Fm,
    c2: ConvNormCache,
    z2: Fm,
}

impl DoubleConv {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha12Rng) -> Self {
        DoubleConv {
            cn1: ConvNorm::new(in_ch, out_ch, 3, 1, 1, rng),
            cn2: ConvNorm::new(out_ch, out_ch, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Fm) -> (Fm, DoubleConvCache) {
        let (z1, c1) = self.cn1.forward(x);
        let a1 = relu(&z1);
        let (z2, c2) = self.cn2.forward(&a1);
        let y = relu(&z2);
        (y, DoubleConvCache { c1, z1, c2, z2 })
    }

    pub fn backward(&mut self, cache: &DoubleConvCache, dy: &Fm) -> Fm {
        let dz2 = relu_backward(&cache.z2, dy);
        let da1 = self.cn2.backward(&cache.c2, &dz2);
        let dz1 = relu_backward(&cache.z1, &da1);
        self.cn1.backward(&cache.c1, &dz1)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("cn1", self.cn1.params_mut());
        out.extend(crate::nn::with_prefix("cn2", self.cn2.params_mut()));
        out
    }

    pub fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("cn1", self.cn1.params());
        out.extend(crate::nn::with_prefix_ref("cn2", self.cn2.params()));
        out
    }
}

/// Encoder-decoder trunk emitting `out_ch` logit maps at input resolution.
///
/// `depth` counts resolution levels: level i runs at 1/2^i scale, the
/// deepest level is the bottleneck, and each decoder step upsamples 2x
/// (nearest), concatenates the same-level encoder output, and applies a
/// [`DoubleConv`]. Channel width doubles per level from `width`.
#[derive(Debug)]
pub struct UnetCore {
    pub depth: usize,
    pub width: usize,
    enc: Vec<DoubleConv>,
    /// dec[0] operates at the deepest decoder level (depth - 2).
    dec: Vec<DoubleConv>,
    head: Conv2d,
}

#[derive(Debug)]
pub struct UnetCoreCache {
    /// Encoder block outputs, level 0 first; enc_out[depth - 1] is the
    /// bottleneck. Needed for pool routing and skip splits.
    enc: Vec<DoubleConvCache>,
    enc_out: Vec<Fm>,
    dec: Vec<DoubleConvCache>,
    head_in: Fm,
}

impl UnetCore {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        depth: usize,
        width: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::Config("unet depth must be at least 1".into()));
        }
        if width < 1 || in_ch < 1 || out_ch < 1 {
            return Err(Error::Config(format!(
                "unet channel counts must be positive (in={in_ch}, out={out_ch}, width={width})"
            )));
        }
        let ch = |level: usize| width << level;
        let mut enc = Vec::with_capacity(depth);
        for level in 0..depth {
            let cin = if level == 0 { in_ch } else { ch(level - 1) };
            enc.push(DoubleConv::new(cin, ch(level), rng));
        }
        let mut dec = Vec::with_capacity(depth.saturating_sub(1));
        for level in (0..depth.saturating_sub(1)).rev() {
            // Upsampled deeper map keeps ch(level+1); concat adds ch(level).
            dec.push(DoubleConv::new(ch(level + 1) + ch(level), ch(level), rng));
        }
        let head = Conv2d::new(width, out_ch, 1, 1, 0, rng);
        Ok(UnetCore { depth, width, enc, dec, head })
    }

    pub fn out_ch(&self) -> usize {
        self.head.out_ch()
    }

    /// Input height/width must be a multiple of this (2^(depth-1)).
    pub fn input_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn check_input(&self, x: &Fm) -> Result<()> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if c != self.enc[0].cn1.conv.in_ch() {
            return Err(Error::Shape(format!(
                "unet expects {} input channels, got {c}",
                self.enc[0].cn1.conv.in_ch()
            )));
        }
        let d = self.input_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "unet of depth {} needs spatial dims divisible by {d}, got {h}x{w}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Returns `out_ch` logit maps at the input resolution.
    pub fn forward(&self, x: &Fm) -> Result<(Fm, UnetCoreCache)> {
        self.check_input(x)?;
        let mut enc_caches = Vec::with_capacity(self.depth);
        let mut enc_out = Vec::with_capacity(self.depth);
        let mut cur = x.clone();
        for (level, block) in self.enc.iter().enumerate() {
            let (y, cache) = block.forward(&cur);
            enc_caches.push(cache);
            cur = if level + 1 < self.depth { max_pool2(&y) } else { y.clone() };
            enc_out.push(y);
        }
        let mut dec_caches = Vec::with_capacity(self.dec.len());
        for (block, level) in self.dec.iter().zip((0..self.depth - 1).rev()) {
            let up = upsample_nearest2(&cur);
            let cat = concat_channels(&up, &enc_out[level]);
            let (y, cache) = block.forward(&cat);
            dec_caches.push(cache);
            cur = y;
        }
        let logits = self.head.forward(&cur);
        Ok((logits, UnetCoreCache { enc: enc_caches, enc_out, dec: dec_caches, head_in: cur }))
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, cache: &UnetCoreCache, dlogits: &Fm) -> Fm {
        let mut d = self.head.backward(&cache.head_in, dlogits);
        // Skip-path gradients collected while unwinding the decoder.
        let mut dskip: Vec<Option<Fm>> = vec![None; self.depth];
        for i in (0..self.dec.len()).rev() {
            // dec[i] ran at level depth-2-i in the forward pass.
            let level = self.depth - 2 - i;
            let dcat = self.dec[i].backward(&cache.dec[i], &d);
            let up_ch = self.width << (level + 1);
            let (dup, ds) = split_channels(&dcat, up_ch);
            dskip[level] = Some(ds);
            d = upsample_nearest2_backward(&dup);
        }
        // `d` now holds the gradient w.r.t. the bottleneck output.
        for level in (0..self.depth).rev() {
            let dy = match dskip[level].take() {
                // Non-bottleneck levels: pooled-path gradient + skip-path
                // gradient, both w.r.t. this encoder block's output.
                Some(ds) => max_pool2_backward(&cache.enc_out[level], &d) + &ds,
                None => d,
            };
            d = self.enc[level].backward(&cache.enc[level], &dy);
        }
        d
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = Vec::new();
        for (i, block) in self.enc.iter_mut().enumerate() {
            out.extend(crate::nn::with_prefix(&format!("enc{}", i + 1), block.params_mut()));
        }
        for (i, block) in self.dec.iter_mut().enumerate() {
            out.extend(crate::nn::with_prefix(&format!("dec{}", i + 1), block.params_mut()));
        }
        out.extend(crate::nn::with_prefix("head", self.head.params_mut()));
        out
    }

    pub fn params(&self) -> ParamsRef<'_> {
        let mut out = Vec::new();
        for (i, block) in self.enc.iter().enumerate() {
            out.extend(crate::nn::with_prefix_ref(&format!("enc{}", i + 1), block.params()));
        }
        for (i, block) in self.dec.iter().enumerate() {
            out.extend(crate::nn::with_prefix_ref(&format!("dec{}", i + 1), block.params()));
        }
        out.extend(crate::nn::with_prefix_ref("head", self.head.params()));
        out
    }
}

/// Binary segmentation U-Net: [`UnetCore`] with a single sigmoid output map.
#[derive(Debug)]
pub struct Unet {
    pub core: UnetCore,
}

#[derive(Debug)]
pub struct UnetCache {
    core: UnetCoreCache,
    /// Sigmoid output in (1, H, W) layout, kept for the sigmoid derivative.
    probs: Fm,
}

impl Unet {
    pub fn new(depth: usize, width: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(Unet { core: UnetCore::new(3, 1, depth, width, rng)? })
    }

    /// Foreground probability map at input resolution.
    pub fn forward(&self, x: &Fm) -> Result<(Mask, UnetCache)> {
        let (logits, core) = self.core.forward(x)?;
        let probs = sigmoid(&logits);
        let mask = probs.index_axis(Axis(0), 0).to_owned();
        Ok((mask, UnetCache { core, probs }))
    }

    pub fn predict(&self, x: &Fm) -> Result<Mask> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients from d(loss)/d(probability map).
    pub fn backward(&mut self, cache: &UnetCache, dmask: &Mask) -> Fm {
        let dprobs = dmask.clone().insert_axis(Axis(0));
        let dlogits = sigmoid_backward(&cache.probs, &dprobs);
        self.core.backward(&cache.core, &dlogits)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        self.core.params_mut()
    }

    pub fn params(&self) -> ParamsRef<'_> {
        self.core.params()
    }

    pub fn num_params(&self) -> usize {
        crate::nn::count_params(&self.params())
    }
}

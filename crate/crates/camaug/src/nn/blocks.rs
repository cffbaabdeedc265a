//! Residual building blocks with explicit forward caches.

use rand_chacha::ChaCha12Rng;

use crate::nn::norm::GroupNormCache;
use crate::nn::{relu, relu_backward, Conv2d, Fm, GroupNorm, ParamsMut, ParamsRef};

/// Groups for GroupNorm: 8 when divisible, otherwise the channel count's
/// largest divisor <= 8 (keeps tiny test widths legal).
fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// conv -> group norm (-> relu at call sites).
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

#[derive(Debug, Clone)]
pub struct ConvNormCache {
    pub x: Fm,
    pub norm: GroupNormCache,
}

impl ConvNorm {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        ConvNorm {
            conv: Conv2d::new(in_ch, out_ch, k, stride, padding, rng),
            norm: GroupNorm::new(out_ch, norm_groups(out_ch)),
        }
    }

    pub fn forward(&self, x: &Fm) -> (Fm, ConvNormCache) {
        let c = self.conv.forward(x);
        let (y, norm) = self.norm.forward(&c);
        (y, ConvNormCache { x: x.clone(), norm })
    }

    pub fn backward(&mut self, cache: &ConvNormCache, dy: &Fm) -> Fm {
        let dc = self.norm.backward(&cache.norm, dy);
        self.conv.backward(&cache.x, &dc)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("conv", self.conv.params_mut());
        out.extend(crate::nn::with_prefix("norm", self.norm.params_mut()));
        out
    }

    pub fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("conv", self.conv.params());
        out.extend(crate::nn::with_prefix_ref("norm", self.norm.params()));
        out
    }
}

/// Two 3x3 conv-norms with identity (or projected) skip:
/// `relu(cn2(relu(cn1(x))) + skip(x))`.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub cn1: ConvNorm,
    pub cn2: ConvNorm,
    /// 1x1 strided projection when shape changes; None = identity skip.
    pub skip: Option<ConvNorm>,
}

#[derive(Debug, Clone)]
pub struct BasicBlockCache {
    c1: ConvNormCache,
    /// Pre-activation output of cn1.
    z1: Fm,
    c2: ConvNormCache,
    skip: Option<ConvNormCache>,
    /// Sum before the final relu.
    pre: Fm,
}

impl BasicBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let skip = if in_ch != out_ch || stride != 1 {
            Some(ConvNorm::new(in_ch, out_ch, 1, stride, 0, rng))
        } else {
            None
        };
        BasicBlock {
            cn1: ConvNorm::new(in_ch, out_ch, 3, stride, 1, rng),
            cn2: ConvNorm::new(out_ch, out_ch, 3, 1, 1, rng),
            skip,
        }
    }

    pub fn forward(&self, x: &Fm) -> (Fm, BasicBlockCache) {
        let (z1, c1) = self.cn1.forward(x);
        let a1 = relu(&z1);
        let (z2, c2) = self.cn2.forward(&a1);
        let (s, skip) = match &self.skip {
            Some(proj) => {
                let (s, cache) = proj.forward(x);
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        let pre = z2 + &s;
        let y = relu(&pre);
        (y, BasicBlockCache { c1, z1, c2, skip, pre })
    }

    pub fn backward(&mut self, cache: &BasicBlockCache, dy: &Fm) -> Fm {
        let dpre = relu_backward(&cache.pre, dy);
        // Main branch.
        let da1 = self.cn2.backward(&cache.c2, &dpre);
        let dz1 = relu_backward(&cache.z1, &da1);
        let dx_main = self.cn1.backward(&cache.c1, &dz1);
        // Skip branch.
        let dx_skip = match (&mut self.skip, &cache.skip) {
            (Some(proj), Some(c)) => proj.backward(c, &dpre),
            (None, None) => dpre,
            _ => unreachable!("cache shape mismatch"),
        };
        dx_main + &dx_skip
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("cn1", self.cn1.params_mut());
        out.extend(crate::nn::with_prefix("cn2", self.cn2.params_mut()));
        if let Some(proj) = &mut self.skip {
            out.extend(crate::nn::with_prefix("skip", proj.params_mut()));
        }
        out
    }

    pub fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("cn1", self.cn1.params());
        out.extend(crate::nn::with_prefix_ref("cn2", self.cn2.params()));
        if let Some(proj) = &self.skip {
            out.extend(crate::nn::with_prefix_ref("skip", proj.params()));
        }
        out
    }
}

/// 1x1 reduce, 3x3, 1x1 expand (x4), residual add: the 50-layer variant's
/// block.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cn1: ConvNorm,
    pub cn2: ConvNorm,
    pub cn3: ConvNorm,
    pub skip: Option<ConvNorm>,
}

#[derive(Debug, Clone)]
pub struct BottleneckCache {
    c1: ConvNormCache,
    z1: Fm,
    c2: ConvNormCache,
    z2: Fm,
    c3: ConvNormCache,
    skip: Option<ConvNormCache>,
    pre: Fm,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

impl Bottleneck {
    pub fn new(in_ch: usize, mid_ch: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let out_ch = mid_ch * BOTTLENECK_EXPANSION;
        let skip = if in_ch != out_ch || stride != 1 {
            Some(ConvNorm::new(in_ch, out_ch, 1, stride, 0, rng))
        } else {
            None
        };
        Bottleneck {
            cn1: ConvNorm::new(in_ch, mid_ch, 1, 1, 0, rng),
            cn2: ConvNorm::new(mid_ch, mid_ch, 3, stride, 1, rng),
            cn3: ConvNorm::new(mid_ch, out_ch, 1, 1, 0, rng),
            skip,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.cn3.conv.out_ch()
    }

    pub fn forward(&self, x: &Fm) -> (Fm, BottleneckCache) {
        let (z1, c1) = self.cn1.forward(x);
        let a1 = relu(&z1);
        let (z2, c2) = self.cn2.forward(&a1);
        let a2 = relu(&z2);
        let (z3, c3) = self.cn3.forward(&a2);
        let (s, skip) = match &self.skip {
            Some(proj) => {
                let (s, cache) = proj.forward(x);
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        let pre = z3 + &s;
        let y = relu(&pre);
        (y, BottleneckCache { c1, z1, c2, z2, c3, skip, pre })
    }

    pub fn backward(&mut self, cache: &BottleneckCache, dy: &Fm) -> Fm {
        let dpre = relu_backward(&cache.pre, dy);
        let da2 = self.cn3.backward(&cache.c3, &dpre);
        let dz2 = relu_backward(&cache.z2, &da2);
        let da1 = self.cn2.backward(&cache.c2, &dz2);
        let dz1 = relu_backward(&cache.z1, &da1);
        let dx_main = self.cn1.backward(&cache.c1, &dz1);
        let dx_skip = match (&mut self.skip, &cache.skip) {
            (Some(proj), Some(c)) => proj.backward(c, &dpre),
            (None, None) => dpre,
            _ => unreachable!("cache shape mismatch"),
        };
        dx_main + &dx_skip
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("cn1", self.cn1.params_mut());
        out.extend(crate::nn::with_prefix("cn2", self.cn2.params_mut()));
        out.extend(crate::nn::with_prefix("cn3", self.cn3.params_mut()));
        if let Some(proj) = &mut self.skip {
            out.extend(crate::nn::with_prefix("skip", proj.params_mut()));
        }
        out
    }

    pub fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("cn1", self.cn1.params());
        out.extend(crate::nn::with_prefix_ref("cn2", self.cn2.params()));
        out.extend(crate::nn::with_prefix_ref("cn3", self.cn3.params()));
        if let Some(proj) = &self.skip {
            out.extend(crate::nn::with_prefix_ref("skip", proj.params()));
        }
        out
    }
}

//! DeepLab-style encoder-decoder: residual backbone, atrous spatial pyramid
//! pooling over the high-level features, and a light decoder that fuses one
//! low-level skip before upsampling back to input resolution.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha12Rng;

use crate::data::Mask;
use crate::nn::blocks::{
    BasicBlock, BasicBlockCache, Bottleneck, BottleneckCache, ConvNorm, ConvNormCache,
};
use crate::nn::pool::{
    global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward, upsample_nearest2,
    upsample_nearest2_backward,
};
use crate::nn::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, split_channels, Conv2d, Fm,
    ParamsMut, ParamsRef,
};
use crate::{Error, Result};

/// Which residual trunk feeds the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeeplabBackbone {
    /// Three basic blocks; low-level skip at 1/2, pyramid at 1/4.
    #[default]
    Small,
    /// Bottleneck stages of 3/4/23/3 blocks; low-level skip at 1/4,
    /// pyramid at 1/32.
    Deep101,
}

impl std::str::FromStr for DeeplabBackbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(DeeplabBackbone::Small),
            "deep101" => Ok(DeeplabBackbone::Deep101),
            other => Err(Error::Config(format!(
                "unknown deeplab backbone '{other}' (expected 'small' or 'deep101')"
            ))),
        }
    }
}

impl std::fmt::Display for DeeplabBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DeeplabBackbone::Small => "small",
            DeeplabBackbone::Deep101 => "deep101",
        })
    }
}

/// Atrous spatial pyramid: parallel dilated 3x3 branches plus a
/// global-average branch, concatenated and fused by a 1x1 conv-norm.
#[derive(Debug)]
pub struct Aspp {
    /// One dilated conv-norm per rate, each emitting `width` channels.
    /// Public so callers can probe a single branch's receptive field.
    pub branches: Vec<ConvNorm>,
    /// 1x1 conv applied to the globally pooled feature vector
    /// (norm-free: its input is a single spatial position).
    pub global_conv: Conv2d,
    pub fuse: ConvNorm,
}

#[derive(Debug)]
pub struct AsppCache {
    branch: Vec<(ConvNormCache, Fm)>,
    /// Pooled input as a (C, 1, 1) map, the global conv's input.
    gmap: Fm,
    gz: Fm,
    fuse_cache: ConvNormCache,
    fuse_z: Fm,
    hw: (usize, usize),
}

impl Aspp {
    fn new(in_ch: usize, width: usize, rates: &[usize], rng: &mut ChaCha12Rng) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Config("aspp needs at least one dilation rate".into()));
        }
        if rates.contains(&0) {
            return Err(Error::Config("aspp dilation rates must be positive".into()));
        }
        let branches = rates
            .iter()
            .map(|&r| {
                let mut cn = ConvNorm::new(in_ch, width, 3, 1, r, rng);
                cn.conv.dilation = r;
                cn
            })
            .collect::<Vec<_>>();
        let global_conv = Conv2d::new(in_ch, width, 1, 1, 0, rng);
        let fuse = ConvNorm::new((rates.len() + 1) * width, 2 * width, 1, 1, 0, rng);
        Ok(Aspp { branches, global_conv, fuse })
    }

    fn width(&self) -> usize {
        self.global_conv.out_ch()
    }

    fn forward(&self, x: &Fm) -> (Fm, AsppCache) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut maps = Vec::with_capacity(self.branches.len() + 1);
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        for cn in &self.branches {
            let (z, c) = cn.forward(x);
            maps.push(relu(&z));
            branch_caches.push((c, z));
        }
        let gmap = Fm::from_shape_vec(
            (x.shape()[0], 1, 1),
            global_avg_pool(x).to_vec(),
        )
        .expect("pooled vector fits a (C,1,1) map");
        let gz = self.global_conv.forward(&gmap);
        let ga = relu(&gz);
        let spread = Fm::from_shape_fn((self.width(), h, w), |(c, _, _)| ga[[c, 0, 0]]);
        maps.push(spread);

        let mut cat = maps[0].clone();
        for m in &maps[1..] {
            cat = concat_channels(&cat, m);
        }
        let (fuse_z, fuse_cache) = self.fuse.forward(&cat);
        let y = relu(&fuse_z);
        (y, AsppCache { branch: branch_caches, gmap, gz, fuse_cache, fuse_z, hw: (h, w) })
    }

    fn backward(&mut self, cache: &AsppCache, dy: &Fm) -> Fm {
        let dfz = relu_backward(&cache.fuse_z, dy);
        let mut dcat = self.fuse.backward(&cache.fuse_cache, &dfz);
        let w = self.width();
        let mut dx: Option<Fm> = None;
        for (cn, (c, z)) in self.branches.iter_mut().zip(cache.branch.iter()) {
            let (chunk, rest) = split_channels(&dcat, w);
            dcat = rest;
            let dz = relu_backward(z, &chunk);
            let d = cn.backward(c, &dz);
            dx = Some(match dx {
                Some(acc) => acc + &d,
                None => d,
            });
        }
        // Remaining channels belong to the global branch: collapse the
        // broadcast, then walk back through relu, 1x1 conv, and pooling.
        let dga = Fm::from_shape_vec(
            (w, 1, 1),
            dcat.axis_iter(Axis(0)).map(|plane| plane.sum()).collect(),
        )
        .expect("per-channel sums fit a (C,1,1) map");
        let dgz = relu_backward(&cache.gz, &dga);
        let dgmap = self.global_conv.backward(&cache.gmap, &dgz);
        let dpool = Array1::from_iter(dgmap.iter().copied());
        let d = global_avg_pool_backward(&dpool, cache.hw.0, cache.hw.1);
        dx.expect("at least one dilation branch") + &d
    }

    fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = Vec::new();
        for (i, cn) in self.branches.iter_mut().enumerate() {
            out.extend(crate::nn::with_prefix(&format!("branch{}", i + 1), cn.params_mut()));
        }
        out.extend(crate::nn::with_prefix("global", self.global_conv.params_mut()));
        out.extend(crate::nn::with_prefix("fuse", self.fuse.params_mut()));
        out
    }

    fn params(&self) -> ParamsRef<'_> {
        let mut out = Vec::new();
        for (i, cn) in self.branches.iter().enumerate() {
            out.extend(crate::nn::with_prefix_ref(&format!("branch{}", i + 1), cn.params()));
        }
        out.extend(crate::nn::with_prefix_ref("global", self.global_conv.params()));
        out.extend(crate::nn::with_prefix_ref("fuse", self.fuse.params()));
        out
    }
}

#[derive(Debug)]
enum Trunk {
    Small { b1: BasicBlock, b2: BasicBlock, b3: BasicBlock },
    Deep { blocks: Vec<Bottleneck> },
}

#[derive(Debug)]
enum TrunkCache {
    Small { b1: BasicBlockCache, b2: BasicBlockCache, b3: BasicBlockCache },
    Deep { blocks: Vec<BottleneckCache> },
}

/// Index of the Deep101 block whose output is the low-level skip (end of
/// the first bottleneck stage).
const DEEP_LOW_BLOCK: usize = 2;

/// Encoder-decoder segmentation model with an atrous pyramid.
#[derive(Debug)]
pub struct Deeplab {
    pub backbone: DeeplabBackbone,
    width: usize,
    stem: ConvNorm,
    stem_pool: bool,
    trunk: Trunk,
    pub aspp: Aspp,
    low_proj: ConvNorm,
    refine: ConvNorm,
    head: Conv2d,
    /// Nearest 2x upsamples between pyramid scale and skip scale.
    ups_to_low: usize,
    /// Nearest 2x upsamples between skip scale and input scale.
    ups_to_full: usize,
}

#[derive(Debug)]
pub struct DeeplabCache {
    stem: ConvNormCache,
    stem_z: Fm,
    /// Post-relu stem activation, kept when the deep stem max-pools.
    stem_a: Option<Fm>,
    trunk: TrunkCache,
    aspp: AsppCache,
    low_z: Fm,
    low_cache: ConvNormCache,
    refine_z: Fm,
    refine_cache: ConvNormCache,
    head_in: Fm,
    probs: Fm,
}

impl Deeplab {
    pub fn new(
        width: usize,
        rates: &[usize],
        backbone: DeeplabBackbone,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if width < 1 {
            return Err(Error::Config("deeplab width must be positive".into()));
        }
        let w = width;
        let (stem, stem_pool, trunk, low_ch, high_ch, ups_to_low, ups_to_full) = match backbone {
            DeeplabBackbone::Small => {
                let stem = ConvNorm::new(3, w, 3, 1, 1, rng);
                let trunk = Trunk::Small {
                    b1: BasicBlock::new(w, w, 1, rng),
                    b2: BasicBlock::new(w, 2 * w, 2, rng),
                    b3: BasicBlock::new(2 * w, 4 * w, 2, rng),
                };
                (stem, false, trunk, 2 * w, 4 * w, 1, 1)
            }
            DeeplabBackbone::Deep101 => {
                let stem = ConvNorm::new(3, w, 7, 2, 3, rng);
                let mut blocks = Vec::new();
                let mut in_ch = w;
                for (mid_mult, count, stride) in [(1, 3, 1), (2, 4, 2), (4, 23, 2), (8, 3, 2)] {
                    for b in 0..count {
                        let s = if b == 0 { stride } else { 1 };
                        let block = Bottleneck::new(in_ch, mid_mult * w, s, rng);
                        in_ch = block.out_ch();
                        blocks.push(block);
                    }
                }
                let trunk = Trunk::Deep { blocks };
                (stem, true, trunk, 4 * w, 32 * w, 3, 2)
            }
        };
        let aspp = Aspp::new(high_ch, w, rates, rng)?;
        let low_proj = ConvNorm::new(low_ch, w, 1, 1, 0, rng);
        let refine = ConvNorm::new(2 * w + w, 2 * w, 3, 1, 1, rng);
        let head = Conv2d::new(2 * w, 1, 1, 1, 0, rng);
        Ok(Deeplab {
            backbone,
            width,
            stem,
            stem_pool,
            trunk,
            aspp,
            low_proj,
            refine,
            head,
            ups_to_low,
            ups_to_full,
        })
    }

    /// Input height/width must be a multiple of this.
    pub fn input_divisor(&self) -> usize {
        match self.backbone {
            DeeplabBackbone::Small => 4,
            DeeplabBackbone::Deep101 => 32,
        }
    }

    fn check_input(&self, x: &Fm) -> Result<()> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if c != 3 {
            return Err(Error::Shape(format!("deeplab expects 3 input channels, got {c}")));
        }
        let d = self.input_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "deeplab ({}) needs spatial dims divisible by {d}, got {h}x{w}",
                self.backbone
            )));
        }
        Ok(())
    }

    /// Foreground probability map at input resolution.
    pub fn forward(&self, x: &Fm) -> Result<(Mask, DeeplabCache)> {
        self.check_input(x)?;
        let (stem_z, stem_cache) = self.stem.forward(x);
        let a = relu(&stem_z);
        let (trunk_in, stem_a) =
            if self.stem_pool { (max_pool2(&a), Some(a)) } else { (a, None) };

        let (low, high, trunk_cache) = match &self.trunk {
            Trunk::Small { b1, b2, b3 } => {
                let (a1, c1) = b1.forward(&trunk_in);
                let (low, c2) = b2.forward(&a1);
                let (high, c3) = b3.forward(&low);
                (low, high, TrunkCache::Small { b1: c1, b2: c2, b3: c3 })
            }
            Trunk::Deep { blocks } => {
                let mut caches = Vec::with_capacity(blocks.len());
                let mut cur = trunk_in;
                let mut low = None;
                for (i, block) in blocks.iter().enumerate() {
                    let (y, c) = block.forward(&cur);
                    caches.push(c);
                    cur = y;
                    if i == DEEP_LOW_BLOCK {
                        low = Some(cur.clone());
                    }
                }
                (low.expect("deep trunk has a low-level block"), cur, TrunkCache::Deep {
                    blocks: caches,
                })
            }
        };

        let (mut d, aspp_cache) = self.aspp.forward(&high);
        for _ in 0..self.ups_to_low {
            d = upsample_nearest2(&d);
        }
        let (low_z, low_cache) = self.low_proj.forward(&low);
        let lp = relu(&low_z);
        let cat = concat_channels(&d, &lp);
        let (refine_z, refine_cache) = self.refine.forward(&cat);
        let mut r = relu(&refine_z);
        for _ in 0..self.ups_to_full {
            r = upsample_nearest2(&r);
        }
        let logits = self.head.forward(&r);
        let probs = sigmoid(&logits);
        let mask = probs.index_axis(Axis(0), 0).to_owned();
        Ok((
            mask,
            DeeplabCache {
                stem: stem_cache,
                stem_z,
                stem_a,
                trunk: trunk_cache,
                aspp: aspp_cache,
                low_z,
                low_cache,
                refine_z,
                refine_cache,
                head_in: r,
                probs,
            },
        ))
    }

    pub fn predict(&self, x: &Fm) -> Result<Mask> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients from d(loss)/d(probability map) and
    /// returns dL/dx.
    pub fn backward(&mut self, cache: &DeeplabCache, dmask: &Mask) -> Fm {
        let dprobs = dmask.clone().insert_axis(Axis(0));
        let dlogits = sigmoid_backward(&cache.probs, &dprobs);
        let mut dr = self.head.backward(&cache.head_in, &dlogits);
        for _ in 0..self.ups_to_full {
            dr = upsample_nearest2_backward(&dr);
        }
        let drz = relu_backward(&cache.refine_z, &dr);
        let dcat = self.refine.backward(&cache.refine_cache, &drz);
        let (mut dd, dlp) = split_channels(&dcat, 2 * self.width);
        let dlz = relu_backward(&cache.low_z, &dlp);
        let dlow_skip = self.low_proj.backward(&cache.low_cache, &dlz);
        for _ in 0..self.ups_to_low {
            dd = upsample_nearest2_backward(&dd);
        }
        let dhigh = self.aspp.backward(&cache.aspp, &dd);

        let dtrunk_in = match (&mut self.trunk, &cache.trunk) {
            (Trunk::Small { b1, b2, b3 }, TrunkCache::Small { b1: c1, b2: c2, b3: c3 }) => {
                let dlow_main = b3.backward(c3, &dhigh);
                let dlow = dlow_main + &dlow_skip;
                let da1 = b2.backward(c2, &dlow);
                b1.backward(c1, &da1)
            }
            (Trunk::Deep { blocks }, TrunkCache::Deep { blocks: caches }) => {
                let mut d = dhigh;
                for i in (0..blocks.len()).rev() {
                    d = blocks[i].backward(&caches[i], &d);
                    if i == DEEP_LOW_BLOCK + 1 {
                        // d is now the gradient w.r.t. the low-level output;
                        // fold in the skip path before continuing down.
                        d = d + &dlow_skip;
                    }
                }
                d
            }
            _ => unreachable!("trunk/cache variant mismatch"),
        };

        let da = match &cache.stem_a {
            Some(a) => max_pool2_backward(a, &dtrunk_in),
            None => dtrunk_in,
        };
        let dz = relu_backward(&cache.stem_z, &da);
        self.stem.backward(&cache.stem, &dz)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = crate::nn::with_prefix("stem", self.stem.params_mut());
        match &mut self.trunk {
            Trunk::Small { b1, b2, b3 } => {
                out.extend(crate::nn::with_prefix("block1", b1.params_mut()));
                out.extend(crate::nn::with_prefix("block2", b2.params_mut()));
                out.extend(crate::nn::with_prefix("block3", b3.params_mut()));
            }
            Trunk::Deep { blocks } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    out.extend(crate::nn::with_prefix(&format!("block{}", i + 1), b.params_mut()));
                }
            }
        }
        out.extend(crate::nn::with_prefix("aspp", self.aspp.params_mut()));
        out.extend(crate::nn::with_prefix("lowproj", self.low_proj.params_mut()));
        out.extend(crate::nn::with_prefix("refine", self.refine.params_mut()));
        out.extend(crate::nn::with_prefix("head", self.head.params_mut()));
        out
    }

    pub fn params(&self) -> ParamsRef<'_> {
        let mut out = crate::nn::with_prefix_ref("stem", self.stem.params());
        match &self.trunk {
            Trunk::Small { b1, b2, b3 } => {
                out.extend(crate::nn::with_prefix_ref("block1", b1.params()));
                out.extend(crate::nn::with_prefix_ref("block2", b2.params()));
                out.extend(crate::nn::with_prefix_ref("block3", b3.params()));
            }
            Trunk::Deep { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    out.extend(crate::nn::with_prefix_ref(&format!("block{}", i + 1), b.params()));
                }
            }
        }
        out.extend(crate::nn::with_prefix_ref("aspp", self.aspp.params()));
        out.extend(crate::nn::with_prefix_ref("lowproj", self.low_proj.params()));
        out.extend(crate::nn::with_prefix_ref("refine", self.refine.params()));
        out.extend(crate::nn::with_prefix_ref("head", self.head.params()));
        out
    }

    pub fn num_params(&self) -> usize {
        crate::nn::count_params(&self.params())
    }
}

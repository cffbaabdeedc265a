//! Centre-of-origin classifier: a residual backbone over Sobel-filtered
//! images whose last convolutional layer feeds both a global-pool + linear
//! head and, later, the saliency extraction. Once trained it is frozen and
//! serves only as the saliency source for segmentation training.

use std::path::Path;

use ndarray::Array1;
use rand_chacha::ChaCha12Rng;

use crate::data::augment::standard_augment;
use crate::data::{MultiCentreDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::filters::{sobel, EdgeImage, SobelMode};
use crate::nn::pool::{global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward};
use crate::nn::{self, act, blob, relu, relu_backward, Adam, Fm, Linear, ParamsMut, ParamsRef};
use crate::rng;
use crate::nn::blocks::{
    BasicBlock, BasicBlockCache, Bottleneck, BottleneckCache, ConvNorm, ConvNormCache,
};

/// Which residual backbone to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Four basic residual blocks, ~100k parameters at width 16. Default.
    Small,
    /// 16 bottleneck blocks in the classic 3-4-6-3 layout (50 weighted
    /// layers); full-scale option.
    Deep50,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(BackboneKind::Small),
            "deep50" => Ok(BackboneKind::Deep50),
            other => Err(Error::Config(format!(
                "unknown backbone kind: {other} (expected small or deep50)"
            ))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackboneKind::Small => "small",
            BackboneKind::Deep50 => "deep50",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Stem width; later stages scale from it.
    pub width: usize,
    /// Expected square input side; `predict_centre` enforces it.
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { kind: BackboneKind::Small, width: 16, input_size: 256 }
    }
}

#[derive(Debug)]
enum Block {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
}

enum BlockCache {
    Basic(BasicBlockCache),
    Bottleneck(BottleneckCache),
}

impl Block {
    fn forward(&self, x: &Fm) -> (Fm, BlockCache) {
        match self {
            Block::Basic(b) => {
                let (y, c) = b.forward(x);
                (y, BlockCache::Basic(c))
            }
            Block::Bottleneck(b) => {
                let (y, c) = b.forward(x);
                (y, BlockCache::Bottleneck(c))
            }
        }
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Fm) -> Fm {
        match (self, cache) {
            (Block::Basic(b), BlockCache::Basic(c)) => b.backward(c, dy),
            (Block::Bottleneck(b), BlockCache::Bottleneck(c)) => b.backward(c, dy),
            _ => unreachable!("cache kind mismatch"),
        }
    }

    fn params_mut(&mut self) -> ParamsMut<'_> {
        match self {
            Block::Basic(b) => b.params_mut(),
            Block::Bottleneck(b) => b.params_mut(),
        }
    }

    fn params(&self) -> ParamsRef<'_> {
        match self {
            Block::Basic(b) => b.params(),
            Block::Bottleneck(b) => b.params(),
        }
    }
}

#[derive(Debug)]
pub struct Classifier {
    pub config: BackboneConfig,
    /// Centre ids in logit order (ascending). `build_classifier` defaults to
    /// 1..=C; training replaces it with the split's actual centres.
    pub centres: Vec<u32>,
    stem: ConvNorm,
    /// Deep50 pools the stem output 2x before the blocks.
    stem_pool: bool,
    blocks: Vec<Block>,
    head: Linear,
}

/// Everything the backward pass and the saliency extraction need from one
/// forward evaluation.
pub struct ForwardCache {
    stem: ConvNormCache,
    stem_z: Fm,
    /// Post-relu stem activations (kept only when the stem pools).
    stem_a: Option<Fm>,
    blocks: Vec<BlockCache>,
    /// Activations of the last convolutional layer, post-activation.
    pub features: Fm,
    pooled: Array1<f64>,
}

/// Builds an untrained model. `num_centres` fixes the logit count.
pub fn build_classifier(
    num_centres: usize,
    config: &BackboneConfig,
    seed: u64,
) -> Result<Classifier> {
    if num_centres < 2 {
        return Err(Error::Config(format!(
            "a centre classifier needs at least 2 centres, got {num_centres}"
        )));
    }
    let mut r = rng::stream(seed, &["classifier", "init"]);
    let w = config.width;
    let (stem, stem_pool, blocks, feat_ch) = match config.kind {
        BackboneKind::Small => {
            let stem = ConvNorm::new(3, w, 3, 1, 1, &mut r);
            let blocks = vec![
                Block::Basic(BasicBlock::new(w, w, 1, &mut r)),
                Block::Basic(BasicBlock::new(w, 2 * w, 2, &mut r)),
                Block::Basic(BasicBlock::new(2 * w, 2 * w, 1, &mut r)),
                Block::Basic(BasicBlock::new(2 * w, 4 * w, 2, &mut r)),
            ];
            (stem, false, blocks, 4 * w)
        }
        BackboneKind::Deep50 => {
            let stem = ConvNorm::new(3, w, 7, 2, 3, &mut r);
            let mut blocks = Vec::new();
            let mut in_ch = w;
            for (stage, &(mid_mul, count, stride)) in
                [(1usize, 3usize, 1usize), (2, 4, 2), (4, 6, 2), (8, 3, 2)].iter().enumerate()
            {
                let mid = w * mid_mul;
                for i in 0..count {
                    let s = if i == 0 { stride } else { 1 };
                    let block = Bottleneck::new(in_ch, mid, s, &mut r);
                    in_ch = block.out_ch();
                    blocks.push(Block::Bottleneck(block));
                }
                let _ = stage;
            }
            (stem, true, blocks, in_ch)
        }
    };
    let head = Linear::new(feat_ch, num_centres, &mut r);
    Ok(Classifier {
        config: config.clone(),
        centres: (1..=num_centres as u32).collect(),
        stem,
        stem_pool,
        blocks,
        head,
    })
}

impl Classifier {
    pub fn num_centres(&self) -> usize {
        self.centres.len()
    }

    /// Name of the designated last convolutional layer.
    pub fn lc_name(&self) -> String {
        format!("block{}.out", self.blocks.len())
    }

    pub fn forward_full(&self, x: &Fm) -> (Array1<f64>, ForwardCache) {
        let (z, stem_cache) = self.stem.forward(x);
        let a = relu(&z);
        let (mut h, stem_a) = if self.stem_pool {
            (max_pool2(&a), Some(a))
        } else {
            (a, None)
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&h);
            caches.push(c);
            h = y;
        }
        let pooled = global_avg_pool(&h);
        let logits = self.head.forward(&pooled);
        (
            logits,
            ForwardCache {
                stem: stem_cache,
                stem_z: z,
                stem_a,
                blocks: caches,
                features: h,
                pooled,
            },
        )
    }

    /// Logits only.
    pub fn forward(&self, x: &Fm) -> Array1<f64> {
        self.forward_full(x).0
    }

    /// Head evaluated on given last-layer activations. Lets callers verify
    /// saliency gradients by perturbing the activations directly.
    pub fn forward_from_features(&self, features: &Fm) -> Array1<f64> {
        self.head.forward(&global_avg_pool(features))
    }

    /// d(logit\[target\]) / d(features): the head is global-pool + linear,
    /// so each channel's gradient is that logit's weight spread evenly over
    /// the spatial positions.
    pub fn grad_logit_wrt_features(&self, cache: &ForwardCache, target: usize) -> Fm {
        assert!(target < self.num_centres(), "target logit out of range");
        let (h, w) = (cache.features.shape()[1], cache.features.shape()[2]);
        let wmat = self.head.w.val.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let row = wmat.row(target).to_owned();
        global_avg_pool_backward(&row, h, w)
    }

    /// Accumulates parameter gradients for dL/dlogits; returns nothing —
    /// classifier inputs never need gradients.
    pub fn backward_full(&mut self, cache: &ForwardCache, dlogits: &Array1<f64>) {
        let dpooled = self.head.backward(&cache.pooled, dlogits);
        let (fh, fw) = (cache.features.shape()[1], cache.features.shape()[2]);
        let mut dh = global_avg_pool_backward(&dpooled, fh, fw);
        for (block, bcache) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            dh = block.backward(bcache, &dh);
        }
        let da = if self.stem_pool {
            max_pool2_backward(cache.stem_a.as_ref().expect("pooled stem cache"), &dh)
        } else {
            dh
        };
        let dz = relu_backward(&cache.stem_z, &da);
        let _ = self.stem.backward(&cache.stem, &dz);
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        let mut out = nn::with_prefix("stem", self.stem.params_mut());
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.extend(nn::with_prefix(&format!("block{}", i + 1), block.params_mut()));
        }
        out.extend(nn::with_prefix("head", self.head.params_mut()));
        out
    }

    pub fn params(&self) -> ParamsRef<'_> {
        let mut out = nn::with_prefix_ref("stem", self.stem.params());
        for (i, block) in self.blocks.iter().enumerate() {
            out.extend(nn::with_prefix_ref(&format!("block{}", i + 1), block.params()));
        }
        out.extend(nn::with_prefix_ref("head", self.head.params()));
        out
    }

    pub fn num_params(&self) -> usize {
        nn::count_params(&self.params())
    }

    /// SHA-256 over parameter names, shapes, and exact value bits — the
    /// frozen-weights witness.
    pub fn weights_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, p) in self.params() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in p.val.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.val.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Logits and the winning centre id for one edge image. Ties resolve to the
/// lowest centre id (first maximum in ascending-centre logit order).
pub fn predict_centre(model: &Classifier, edge: &EdgeImage) -> Result<(Array1<f64>, u32)> {
    let (h, w) = (edge.data.shape()[1], edge.data.shape()[2]);
    if h != model.config.input_size || w != model.config.input_size {
        return Err(Error::Shape(format!(
            "classifier expects {0}x{0} input, got {h}x{w}",
            model.config.input_size
        )));
    }
    let logits = model.forward(&edge.data);
    let mut best = 0usize;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Ok((logits, model.centres[best]))
}

/// Training hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Apply the standard geometric/jitter augmentations while training.
    pub augment: bool,
    pub sobel_mode: SobelMode,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 10,
            lr: 1e-5,
            batch: 4,
            augment: true,
            sobel_mode: SobelMode::GrayscaleFirst,
            seed: 0,
        }
    }
}

/// Checkpoint sidecar: everything needed to rebuild and to verify protocol
/// compatibility with a segmentation run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub centres: Vec<u32>,
    pub split_fingerprint: String,
    pub config: BackboneConfig,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub weights_sha256: String,
}

/// Trains in place on the split's train samples (Sobel-filtered, optionally
/// augmented) and returns the mean cross-entropy per epoch.
pub fn train_classifier(
    model: &mut Classifier,
    ds: &MultiCentreDataset,
    split: &SplitSpec,
    opts: &TrainOpts,
) -> Result<Vec<f64>> {
    if split.train.is_empty() {
        return Err(Error::Dataset("classifier training split is empty".into()));
    }
    let mut train: Vec<&crate::data::Sample> = Vec::with_capacity(split.train.len());
    for id in &split.train {
        train.push(
            ds.get(id)
                .ok_or_else(|| Error::Dataset(format!("split references unknown sample {id}")))?,
        );
    }
    let mut centres: Vec<u32> = train.iter().map(|s| s.centre).collect();
    centres.sort_unstable();
    centres.dedup();
    if centres.len() < 2 {
        return Err(Error::Dataset(format!(
            "classifier needs >= 2 centres in the training set, found {centres:?}"
        )));
    }
    if centres.len() != model.num_centres() {
        return Err(Error::Config(format!(
            "model has {} logits but the training set spans {} centres",
            model.num_centres(),
            centres.len()
        )));
    }
    model.centres = centres.clone();
    let class_of = move |centre: u32| -> usize {
        centres.iter().position(|&c| c == centre).expect("centre seen during setup")
    };

    let mut opt = Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        use rand::seq::SliceRandom;
        let mut shuffle_rng =
            rng::stream(opts.seed, &["classifier", "shuffle", &epoch.to_string()]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch) {
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let s = train[i];
                let image = if opts.augment {
                    let mut aug_rng: ChaCha12Rng = rng::sample_stream(
                        opts.seed,
                        "classifier-aug",
                        &s.sample_id,
                        epoch as u64,
                    );
                    let (aug, _) = standard_augment(s, None, &mut aug_rng);
                    aug.image
                } else {
                    s.image.clone()
                };
                let edge = sobel(&image, opts.sobel_mode)?;
                let (logits, cache) = model.forward_full(&edge.data);
                let (loss, mut dlogits) = act::softmax_cross_entropy(&logits, class_of(s.centre));
                epoch_loss += loss;
                dlogits.mapv_inplace(|g| g * scale);
                model.backward_full(&cache, &dlogits);
            }
            opt.step(model.params_mut());
            for (_, p) in model.params_mut() {
                p.zero_grad();
            }
        }
        losses.push(epoch_loss / train.len() as f64);
    }
    Ok(losses)
}

const WEIGHTS_FILE: &str = "classifier.bin";
const META_FILE: &str = "classifier.json";

/// Writes `classifier.bin` (weights blob) and `classifier.json` (metadata)
/// into `dir`.
pub fn save_classifier(dir: &Path, model: &Classifier, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors: Vec<(String, ndarray::ArrayD<f64>)> =
        model.params().into_iter().map(|(n, p)| (n, p.val.clone())).collect();
    blob::write_tensors(&dir.join(WEIGHTS_FILE), &tensors)?;
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Checkpoint { path: meta_path.clone(), msg: e.to_string() })?;
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Rebuilds the model from `dir` and verifies the stored weights hash.
pub fn load_classifier(dir: &Path) -> Result<(Classifier, CheckpointMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Json { path: meta_path.clone(), source: e })?;
    let mut model = build_classifier(meta.centres.len(), &meta.config, 0)?;
    model.centres = meta.centres.clone();
    let tensors = blob::read_tensors(&dir.join(WEIGHTS_FILE))?;
    let mut loaded = 0usize;
    for (name, p) in model.params_mut() {
        let t = tensors.get(&name).ok_or_else(|| Error::Checkpoint {
            path: dir.join(WEIGHTS_FILE),
            msg: format!("missing tensor {name}"),
        })?;
        if t.shape() != p.val.shape() {
            return Err(Error::Checkpoint {
                path: dir.join(WEIGHTS_FILE),
                msg: format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.val.shape()
                ),
            });
        }
        p.val.assign(t);
        loaded += 1;
    }
    if loaded != tensors.len() {
        return Err(Error::Checkpoint {
            path: dir.join(WEIGHTS_FILE),
            msg: format!("blob holds {} tensors, model consumed {loaded}", tensors.len()),
        });
    }
    let hash = model.weights_hash();
    if hash != meta.weights_sha256 {
        return Err(Error::Checkpoint {
            path: dir.join(WEIGHTS_FILE),
            msg: "weights hash does not match metadata (corrupt or mixed checkpoint)".into(),
        });
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests;

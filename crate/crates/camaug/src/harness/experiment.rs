//! One experiment, end to end: load data, split by patient, obtain the
//! frozen centre classifier, cache saliency keep-masks, train the
//! segmentation model with standard augmentation plus stochastic masking,
//! and evaluate the best-validation checkpoint on val / test_in / test_out.
//!
//! Every step draws from a named sub-stream of the config's root seed, and
//! per-epoch state is checkpointed, so an interrupted run resumed from disk
//! finishes with bit-identical metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::augmentation::MaskingPolicy;
use crate::classifier::{
    build_classifier, load_classifier, save_classifier, train_classifier, BackboneConfig,
    CheckpointMeta, Classifier, TrainOpts,
};
use crate::data::augment::standard_augment;
use crate::data::polypgen::{load_polypgen, LayoutConfig};
use crate::data::split::split_patient_level;
use crate::data::synth::generate_synthetic;
use crate::data::{Mask, MultiCentreDataset, Sample, SplitSpec};
use crate::filters::{sobel, SobelMode};
use crate::harness::config::{DataConfig, ExperimentConfig, SPLIT_RATIOS};
use crate::metrics::{aggregate, evaluate_pair, MetricsReport, SetMetrics};
use crate::nn::{blob, Adam};
use crate::rng;
use crate::saliency::{make_record, CamCache, CamTarget};
use crate::segmodels::{SdnetLossWeights, SegConfig, SegModel};
use crate::{Error, Result};

/// Training statistics for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total training loss over the epoch's samples.
    pub train_loss: f64,
    /// Mean of the Dice component alone (equals `train_loss` for plain
    /// encoder-decoders).
    pub train_dice_loss: f64,
    /// Mean validation Dice after the epoch.
    pub val_dice: f64,
}

/// Everything a finished run leaves behind, persisted as `run.json`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    /// Fingerprint of the resolved config (names the run directory).
    pub fingerprint: String,
    /// Fingerprint of the patient-level split the run consumed.
    pub split_fingerprint: String,
    pub model: String,
    pub held_out_centre: u32,
    pub masking_enabled: bool,
    /// Masking probability; `None` for baselines.
    pub p: Option<f64>,
    pub seed: u64,
    pub epochs_trained: usize,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub loss_curve: Vec<EpochStats>,
    /// Metrics of the best-validation checkpoint on val / test_in / test_out.
    pub metrics: MetricsReport,
}

/// Sidecar of the best-validation checkpoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct BestMeta {
    fingerprint: String,
    epoch: usize,
    val_dice: f64,
}

/// Sidecar of the rolling last checkpoint; everything needed to resume.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct LastMeta {
    fingerprint: String,
    epoch: usize,
    best_epoch: usize,
    best_val_dice: f64,
    loss_curve: Vec<EpochStats>,
}

const BEST_WEIGHTS: &str = "best.bin";
const BEST_META: &str = "best.json";
const LAST_WEIGHTS: &str = "last.bin";
const LAST_OPT: &str = "last-opt.bin";
const LAST_META: &str = "last.json";
const RUN_RECORD: &str = "run.json";

/// Materializes the configured dataset (generation is seeded by the root
/// seed, so two runs with one config see identical images).
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<MultiCentreDataset> {
    match &cfg.data {
        DataConfig::Synthetic(sc) => generate_synthetic(sc, cfg.seed),
        DataConfig::Real { path } => load_polypgen(path, &LayoutConfig::default()),
    }
}

/// The run's patient-level split under the fixed ratios.
pub fn make_split(cfg: &ExperimentConfig, ds: &MultiCentreDataset) -> Result<SplitSpec> {
    split_patient_level(ds, cfg.held_out_centre, SPLIT_RATIOS, cfg.seed)
}

fn sample_by_id<'d>(ds: &'d MultiCentreDataset, id: &str) -> Result<&'d Sample> {
    ds.get(id)
        .ok_or_else(|| Error::Dataset(format!("split references unknown sample {id}")))
}

/// Loads the split's centre classifier, or trains and saves it when absent
/// and `auto_pretrain` is on.
///
/// A checkpoint trained against a different split is a protocol violation,
/// not a cache miss: its saliency maps would leak a different partition's
/// information, so the mismatch is a hard error.
pub fn ensure_classifier(
    cfg: &ExperimentConfig,
    ds: &MultiCentreDataset,
    split: &SplitSpec,
) -> Result<(Classifier, CheckpointMeta)> {
    let dir = cfg.classifier_dir();
    if dir.join("classifier.json").exists() {
        let (model, meta) = load_classifier(&dir)?;
        if meta.split_fingerprint != split.fingerprint() {
            return Err(Error::Protocol(format!(
                "classifier at {} was trained on split {} but this run uses split {}",
                dir.display(),
                &meta.split_fingerprint[..12.min(meta.split_fingerprint.len())],
                &split.fingerprint()[..12],
            )));
        }
        return Ok((model, meta));
    }
    if !cfg.auto_pretrain {
        return Err(Error::Config(format!(
            "no classifier checkpoint at {} and auto_pretrain is off; run `pretrain-classifier` first",
            dir.display()
        )));
    }

    let mut centres: Vec<u32> = split
        .train
        .iter()
        .map(|id| sample_by_id(ds, id).map(|s| s.centre))
        .collect::<Result<_>>()?;
    centres.sort_unstable();
    centres.dedup();
    let side = sample_by_id(ds, &split.train[0])?.image.shape()[1];
    let backbone = BackboneConfig {
        kind: cfg.classifier.kind,
        width: cfg.classifier.width,
        input_size: side,
    };
    let mut model = build_classifier(centres.len(), &backbone, cfg.seed)?;
    let opts = TrainOpts {
        epochs: cfg.epochs.classifier,
        lr: cfg.optimizer.lr,
        batch: cfg.optimizer.batch,
        augment: true,
        sobel_mode: SobelMode::GrayscaleFirst,
        seed: cfg.seed,
    };
    train_classifier(&mut model, ds, split, &opts)?;
    let meta = CheckpointMeta {
        centres: model.centres.clone(),
        split_fingerprint: split.fingerprint(),
        config: backbone,
        epochs: opts.epochs,
        seed: opts.seed,
        augment: opts.augment,
        weights_sha256: model.weights_hash(),
    };
    save_classifier(&dir, &model, &meta)?;
    Ok((model, meta))
}

/// Fills the saliency cache for every training sample and persists it.
///
/// The cache key is (classifier weights hash, threshold); entries for other
/// keys are recomputed, never reused. The map explains the classifier's own
/// prediction for each Sobel-filtered image.
pub fn ensure_cams(
    cfg: &ExperimentConfig,
    ds: &MultiCentreDataset,
    split: &SplitSpec,
    classifier: &Classifier,
) -> Result<CamCache> {
    let path = cfg.cam_cache_path();
    let hash = classifier.weights_hash();
    let th = cfg.masking.threshold;
    let mut cache = CamCache::open_or_fresh(&path, &hash, th)?;
    let mut added = false;
    for id in &split.train {
        if cache.get(id, &hash, th).is_some() {
            continue;
        }
        let s = sample_by_id(ds, id)?;
        let edge = sobel(&s.image, SobelMode::GrayscaleFirst)?;
        let record = make_record(classifier, &edge, id, th, CamTarget::Predicted)?;
        cache.put(&record)?;
        added = true;
    }
    if added {
        cache.save(&path)?;
    }
    Ok(cache)
}

fn save_weights(path: &Path, model: &SegModel) -> Result<()> {
    let tensors: Vec<(String, ArrayD<f64>)> =
        model.params().into_iter().map(|(n, p)| (n, p.val.clone())).collect();
    blob::write_tensors(path, &tensors)
}

fn load_weights(path: &Path, model: &mut SegModel) -> Result<()> {
    let tensors = blob::read_tensors(path)?;
    let mut used = 0usize;
    for (name, p) in model.params_mut() {
        let t = tensors.get(&name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("missing tensor {name}"),
        })?;
        if t.shape() != p.val.shape() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), p.val.shape()),
            });
        }
        p.val.assign(t);
        used += 1;
    }
    if used != tensors.len() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("blob holds {} tensors, model consumed {used}", tensors.len()),
        });
    }
    Ok(())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

/// Per-sample metrics averaged over one id list.
fn eval_set(model: &SegModel, ds: &MultiCentreDataset, ids: &[String]) -> Result<SetMetrics> {
    let mut per = Vec::with_capacity(ids.len());
    for id in ids {
        let s = sample_by_id(ds, id)?;
        let pred = model.predict(&s.image)?;
        per.push(evaluate_pair(&pred, &s.mask)?);
    }
    aggregate(&per)
}

/// Runs the full pipeline for one configuration and returns its record.
///
/// Re-invoking with the same config resumes from the last checkpoint (or,
/// when training already finished, just re-evaluates the best checkpoint);
/// either way the final metrics are identical to an uninterrupted run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    Ok(run_until(cfg, None)?.expect("no stop requested, so the run completes"))
}

/// [`run_experiment`] with an optional early stop after a given epoch —
/// the hook that lets tests interrupt a run exactly where they want.
/// Returns `None` when stopped early (checkpoints are on disk, no record).
pub(crate) fn run_until(
    cfg: &ExperimentConfig,
    stop_after_epoch: Option<usize>,
) -> Result<Option<RunRecord>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let split = make_split(cfg, &ds)?;
    let fp = cfg.fingerprint();
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    cfg.save(&run_dir.join("config.toml"))?;
    split.save(&run_dir.join("split.json"))?;

    // The saliency machinery only exists for augmented runs; baselines
    // never touch the classifier, so both pipelines share everything else.
    let mask_source = if cfg.masking.enabled {
        let (classifier, _) = ensure_classifier(cfg, &ds, &split)?;
        let cache = ensure_cams(cfg, &ds, &split, &classifier)?;
        let policy = MaskingPolicy::new(cfg.masking.p, cfg.masking.mode, cfg.seed)?;
        Some((cache, classifier.weights_hash(), policy))
    } else {
        None
    };

    let mut model = SegModel::build(&cfg.model, cfg.seed)?;
    let side = sample_by_id(&ds, &split.train[0])?.image.shape()[1];
    let divisor = model.input_divisor();
    if side % divisor != 0 {
        return Err(Error::Config(format!(
            "{} needs the input side divisible by {divisor}, got {side}",
            model.kind()
        )));
    }
    let latent_dim = match &cfg.model {
        SegConfig::Sdnet(c) => Some(c.latent_dim),
        _ => None,
    };
    let loss_weights = SdnetLossWeights::default();
    let mut opt = Adam::new(cfg.optimizer.lr);

    // Resume when the rolling checkpoint belongs to this exact config.
    let mut start_epoch = 0usize;
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut curve: Vec<EpochStats> = Vec::new();
    let last_meta_path = run_dir.join(LAST_META);
    if last_meta_path.exists() {
        let last: LastMeta = read_json(&last_meta_path)?;
        if last.fingerprint == fp {
            load_weights(&run_dir.join(LAST_WEIGHTS), &mut model)?;
            let opt_path = run_dir.join(LAST_OPT);
            let state = blob::read_tensors(&opt_path)?;
            opt.load_state(&state)
                .map_err(|msg| Error::Checkpoint { path: opt_path, msg })?;
            start_epoch = last.epoch + 1;
            best_epoch = last.best_epoch;
            best_val = last.best_val_dice;
            curve = last.loss_curve;
        }
    }

    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    let n_train = split.train.len();
    for epoch in start_epoch..cfg.epochs.segmentation {
        let epoch_u = epoch as u64;
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &["seg", "shuffle", &epoch.to_string()]));

        let mut loss_sum = 0.0;
        let mut dice_sum = 0.0;
        for chunk in order.chunks(cfg.optimizer.batch) {
            for &i in chunk {
                let s = sample_by_id(&ds, &split.train[i])?;
                seen_ids.insert(s.sample_id.clone());

                let raw_keep: Option<Mask> = match &mask_source {
                    Some((cache, hash, _)) => {
                        let rec =
                            cache.get(&s.sample_id, hash, cfg.masking.threshold).ok_or_else(
                                || {
                                    Error::Cache(format!(
                                        "saliency cache has no record for {}",
                                        s.sample_id
                                    ))
                                },
                            )?;
                        Some(rec.keep_mask)
                    }
                    None => None,
                };
                // The geometric transform hits image, ground truth, and
                // keep-mask identically; only afterwards does the Bernoulli
                // draw decide whether the mask is applied at all.
                let mut aug_rng = rng::sample_stream(cfg.seed, "seg-aug", &s.sample_id, epoch_u);
                let (aug, aug_keep) = standard_augment(s, raw_keep.as_ref(), &mut aug_rng);
                let keep = match (&mask_source, aug_keep) {
                    (Some((_, _, policy)), Some(k))
                        if policy.draw_mask_decision(&s.sample_id, epoch_u) =>
                    {
                        Some(k)
                    }
                    _ => None,
                };
                let eps = latent_dim.map(|l| {
                    let mut r =
                        rng::sample_stream(cfg.seed, "sdnet-eps", &s.sample_id, epoch_u);
                    Array1::from_shape_fn(l, |_| r.sample::<f64, _>(StandardNormal))
                });

                let losses =
                    model.train_step(&aug.image, &aug.mask, keep.as_ref(), eps.as_ref(), &loss_weights)?;
                loss_sum += losses.total;
                dice_sum += losses.dice;
            }
            let scale = 1.0 / chunk.len() as f64;
            for (_, p) in model.params_mut() {
                p.grad.mapv_inplace(|g| g * scale);
            }
            opt.step(model.params_mut());
            model.zero_grads();
        }

        seen_ids.extend(split.val.iter().cloned());
        let val = eval_set(&model, &ds, &split.val)?;
        curve.push(EpochStats {
            epoch,
            train_loss: loss_sum / n_train as f64,
            train_dice_loss: dice_sum / n_train as f64,
            val_dice: val.dice,
        });
        if val.dice > best_val {
            best_val = val.dice;
            best_epoch = epoch;
            save_weights(&run_dir.join(BEST_WEIGHTS), &model)?;
            write_json(
                &run_dir.join(BEST_META),
                &BestMeta { fingerprint: fp.clone(), epoch, val_dice: val.dice },
            )?;
        }
        save_weights(&run_dir.join(LAST_WEIGHTS), &model)?;
        blob::write_tensors(&run_dir.join(LAST_OPT), &opt.state_tensors())?;
        write_json(
            &last_meta_path,
            &LastMeta {
                fingerprint: fp.clone(),
                epoch,
                best_epoch,
                best_val_dice: best_val,
                loss_curve: curve.clone(),
            },
        )?;

        if stop_after_epoch == Some(epoch) {
            return Ok(None);
        }
    }

    // No sample the model trained or validated on may belong to the
    // held-out centre; the check runs on the ids actually seen in batches.
    let test_out: BTreeSet<&str> = split.test_out.iter().map(String::as_str).collect();
    if let Some(id) = seen_ids.iter().find(|id| test_out.contains(id.as_str())) {
        return Err(Error::Protocol(format!(
            "held-out sample {id} appeared in a training or validation batch"
        )));
    }

    // Test metrics come from the best-validation checkpoint, not the last.
    let best_meta: BestMeta = read_json(&run_dir.join(BEST_META))?;
    load_weights(&run_dir.join(BEST_WEIGHTS), &mut model)?;
    let mut per_set = BTreeMap::new();
    per_set.insert("val".to_string(), eval_set(&model, &ds, &split.val)?);
    per_set.insert("test_in".to_string(), eval_set(&model, &ds, &split.test_in)?);
    per_set.insert("test_out".to_string(), eval_set(&model, &ds, &split.test_out)?);

    let record = RunRecord {
        fingerprint: fp.clone(),
        split_fingerprint: split.fingerprint(),
        model: cfg.model.kind().to_string(),
        held_out_centre: cfg.held_out_centre,
        masking_enabled: cfg.masking.enabled,
        p: cfg.masking.enabled.then_some(cfg.masking.p),
        seed: cfg.seed,
        epochs_trained: curve.len(),
        best_epoch: best_meta.epoch,
        best_val_dice: best_meta.val_dice,
        loss_curve: curve,
        metrics: MetricsReport {
            model: cfg.model.kind().to_string(),
            held_out_centre: cfg.held_out_centre,
            p: cfg.masking.enabled.then_some(cfg.masking.p),
            fingerprint: fp,
            per_set,
        },
    };
    write_json(&run_dir.join(RUN_RECORD), &record)?;
    Ok(Some(record))
}

/// Reads a persisted run record back from a run directory.
pub fn load_run_record(run_dir: &Path) -> Result<RunRecord> {
    read_json(&run_dir.join(RUN_RECORD))
}

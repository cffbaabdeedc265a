//! Dataset ingestion, synthesis, splitting, preprocessing, augmentation.

pub mod augment;
pub mod imgio;
pub mod polypgen;
pub mod preprocess;
pub mod split;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Fm;

/// Single-channel raster; binary-valued ({0.0, 1.0}) when used as a mask.
pub type Mask = Array2<f64>;

/// One image/mask pair with its provenance labels.
#[derive(Debug, Clone)]
pub struct Sample {
    /// 3-channel image, values in [0, 1].
    pub image: Fm,
    /// Binary ground-truth mask, same spatial size as `image`.
    pub mask: Mask,
    /// Centre id in [1, C].
    pub centre: u32,
    pub patient_id: String,
    /// Unique within the parent dataset.
    pub sample_id: String,
}

impl Sample {
    /// Checks the in-type invariants: mask binarity and matching spatial dims.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.shape()[1], self.image.shape()[2]);
        if self.image.shape()[0] != 3 {
            return Err(Error::Dataset(format!(
                "sample {}: expected 3 image channels, got {}",
                self.sample_id,
                self.image.shape()[0]
            )));
        }
        if self.mask.shape() != [h, w] {
            return Err(Error::Dataset(format!(
                "sample {}: mask {}x{} does not match image {h}x{w}",
                self.sample_id,
                self.mask.shape()[0],
                self.mask.shape()[1]
            )));
        }
        if self.mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("sample {}: mask is not binary", self.sample_id)));
        }
        Ok(())
    }
}

/// An ordered collection of samples from C centres.
#[derive(Debug, Clone, Default)]
pub struct MultiCentreDataset {
    pub samples: Vec<Sample>,
    /// Valid centre ids, ascending.
    pub centres: Vec<u32>,
    /// For synthetic datasets: per-sample binary raster marking overlay
    /// pixels, keyed by sample_id.
    pub overlay_truth: Option<BTreeMap<String, Mask>>,
}

impl MultiCentreDataset {
    /// Checks dataset-level invariants: unique sample ids, centres known,
    /// per-sample invariants.
    pub fn validate(&self) -> Result<()> {
        let centre_set: BTreeSet<u32> = self.centres.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            s.validate()?;
            if !centre_set.contains(&s.centre) {
                return Err(Error::Dataset(format!(
                    "sample {} references unknown centre {}",
                    s.sample_id, s.centre
                )));
            }
            if !seen.insert(s.sample_id.clone()) {
                return Err(Error::Dataset(format!("duplicate sample_id {}", s.sample_id)));
            }
        }
        if let Some(truth) = &self.overlay_truth {
            for id in truth.keys() {
                if !seen.contains(id) {
                    return Err(Error::Dataset(format!(
                        "overlay_truth references unknown sample {id}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Samples belonging to one centre, in dataset order.
    pub fn centre_samples(&self, centre: u32) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.centre == centre)
    }

    /// Count of samples per centre, keyed by centre id.
    pub fn centre_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> = self.centres.iter().map(|&c| (c, 0)).collect();
        for s in &self.samples {
            *counts.entry(s.centre).or_default() += 1;
        }
        counts
    }
}

/// A leave-one-centre-out, patient-level split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub held_out_centre: u32,
    /// Sample ids per partition, sorted for a canonical representation.
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test_in: Vec<String>,
    /// Every sample of the held-out centre.
    pub test_out: Vec<String>,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
}

impl SplitSpec {
    /// Content fingerprint used to detect mismatched artefacts (a classifier
    /// trained on one split must not serve CAMs for another).
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.held_out_centre.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        for (tag, ids) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test_in", &self.test_in),
            ("test_out", &self.test_out),
        ] {
            h.update(tag.as_bytes());
            for id in ids.iter() {
                h.update([0xff]);
                h.update(id.as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Dataset(format!("serializing split: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
    }
}

//! Persistent store for per-sample saliency records.
//!
//! Activation maps are deterministic given (sample, classifier weights,
//! threshold), so they are computed once and reloaded on every later run.
//! A record is keyed by sample id *and* the classifier's weight hash and
//! threshold: a lookup against a store built from different weights or a
//! different threshold reports a miss and the caller recomputes.
//!
//! On disk: `"CAMC"`, version (u16), classifier hash (64 hex bytes),
//! threshold (f64), record count (u32); then per record the sample id
//! (u16 length prefix), target centre (u32), height and width (u32 each),
//! the map quantized to 16-bit fixed point, and the keep-mask bit-packed
//! LSB-first in row-major order. All integers little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::SaliencyRecord;
use crate::data::Mask;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CAMC";
const VERSION: u16 = 1;
const QUANT: f64 = 65535.0;

#[derive(Debug, Clone, PartialEq)]
struct StoredCam {
    target_centre: u32,
    h: usize,
    w: usize,
    cam_q: Vec<u16>,
    mask_bits: Vec<u8>,
}

/// In-memory saliency store with an on-disk snapshot format.
#[derive(Debug, Clone)]
pub struct CamCache {
    classifier_hash: String,
    threshold: f64,
    records: BTreeMap<String, StoredCam>,
}

impl CamCache {
    /// Empty store bound to one classifier and threshold.
    pub fn new(classifier_hash: &str, threshold: f64) -> Self {
        CamCache {
            classifier_hash: classifier_hash.to_string(),
            threshold,
            records: BTreeMap::new(),
        }
    }

    pub fn classifier_hash(&self) -> &str {
        &self.classifier_hash
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    /// Stores one record, quantizing the map to 16-bit steps; the keep-mask
    /// is kept exact. Replaces any existing record for the same sample.
    pub fn put(&mut self, record: &SaliencyRecord) -> Result<()> {
        if record.sample_id.is_empty() || record.sample_id.len() > u16::MAX as usize {
            return Err(Error::Cache(format!(
                "sample id length {} outside 1..=65535",
                record.sample_id.len()
            )));
        }
        if record.threshold.to_bits() != self.threshold.to_bits() {
            return Err(Error::Cache(format!(
                "record threshold {} does not match the store's {}",
                record.threshold, self.threshold
            )));
        }
        if record.cam.raw_dim() != record.keep_mask.raw_dim() {
            return Err(Error::Cache(format!(
                "cam {:?} and keep-mask {:?} disagree on shape",
                record.cam.shape(),
                record.keep_mask.shape()
            )));
        }
        if record.cam.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Cache(format!(
                "activation map for {} leaves [0,1]",
                record.sample_id
            )));
        }
        let (h, w) = (record.cam.shape()[0], record.cam.shape()[1]);
        let cam_q: Vec<u16> = record.cam.iter().map(|&v| (v * QUANT).round() as u16).collect();
        let mut mask_bits = vec![0u8; (h * w).div_ceil(8)];
        for (i, &v) in record.keep_mask.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Cache(format!(
                    "keep-mask for {} is not binary",
                    record.sample_id
                )));
            }
            if v == 1.0 {
                mask_bits[i / 8] |= 1 << (i % 8);
            }
        }
        self.records.insert(
            record.sample_id.clone(),
            StoredCam { target_centre: record.target_centre, h, w, cam_q, mask_bits },
        );
        Ok(())
    }

    /// Looks a record up under the full key. A mismatched classifier hash or
    /// threshold is a miss even when the sample id exists: those records
    /// belong to a different model and must be recomputed, not reused.
    pub fn get(
        &self,
        sample_id: &str,
        classifier_hash: &str,
        threshold: f64,
    ) -> Option<SaliencyRecord> {
        if classifier_hash != self.classifier_hash
            || threshold.to_bits() != self.threshold.to_bits()
        {
            return None;
        }
        let stored = self.records.get(sample_id)?;
        let cam = Mask::from_shape_vec(
            (stored.h, stored.w),
            stored.cam_q.iter().map(|&q| q as f64 / QUANT).collect(),
        )
        .expect("stored dims match payload");
        let keep_mask = Mask::from_shape_fn((stored.h, stored.w), |(y, x)| {
            let i = y * stored.w + x;
            ((stored.mask_bits[i / 8] >> (i % 8)) & 1) as f64
        });
        Some(SaliencyRecord {
            cam,
            keep_mask,
            threshold: self.threshold,
            target_centre: stored.target_centre,
            sample_id: sample_id.to_string(),
        })
    }

    /// Writes the whole store to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.classifier_hash.len() != 64 || !self.classifier_hash.is_ascii() {
            return Err(Error::Cache(format!(
                "classifier hash must be 64 hex characters, got {:?}",
                self.classifier_hash
            )));
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(self.classifier_hash.as_bytes());
        buf.extend_from_slice(&self.threshold.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (id, rec) in &self.records {
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            buf.extend_from_slice(&rec.target_centre.to_le_bytes());
            buf.extend_from_slice(&(rec.h as u32).to_le_bytes());
            buf.extend_from_slice(&(rec.w as u32).to_le_bytes());
            for &q in &rec.cam_q {
                buf.extend_from_slice(&q.to_le_bytes());
            }
            buf.extend_from_slice(&rec.mask_bits);
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a store back from `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(cur.corrupt("bad magic"));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(cur.corrupt(&format!("unsupported version {version}")));
        }
        let hash_bytes = cur.take(64)?;
        let classifier_hash = std::str::from_utf8(hash_bytes)
            .map_err(|_| Error::Cache(format!("{}: classifier hash is not UTF-8", path.display())))?
            .to_string();
        let threshold = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let id_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|_| Error::Cache(format!("{}: sample id is not UTF-8", path.display())))?
                .to_string();
            let target_centre = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
            let h = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let w = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let mut cam_q = Vec::with_capacity(h * w);
            for chunk in cur.take(2 * h * w)?.chunks_exact(2) {
                cam_q.push(u16::from_le_bytes(chunk.try_into().unwrap()));
            }
            let mask_bits = cur.take((h * w).div_ceil(8))?.to_vec();
            if records.insert(id.clone(), StoredCam { target_centre, h, w, cam_q, mask_bits })
                .is_some()
            {
                return Err(cur.corrupt(&format!("duplicate record for {id}")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(cur.corrupt("trailing bytes after the last record"));
        }
        Ok(CamCache { classifier_hash, threshold, records })
    }

    /// Loads `path` if it exists *and* was built for this classifier hash
    /// and threshold; otherwise returns a fresh empty store (a stale or
    /// missing file is a miss, never an error).
    pub fn open_or_fresh(path: &Path, classifier_hash: &str, threshold: f64) -> Result<Self> {
        if !path.exists() {
            return Ok(CamCache::new(classifier_hash, threshold));
        }
        let cache = CamCache::load(path)?;
        if cache.classifier_hash == classifier_hash
            && cache.threshold.to_bits() == threshold.to_bits()
        {
            Ok(cache)
        } else {
            Ok(CamCache::new(classifier_hash, threshold))
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Cache(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn corrupt(&self, what: &str) -> Error {
        Error::Cache(format!("{}: {what}", self.path.display()))
    }
}

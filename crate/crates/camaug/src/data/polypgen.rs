//! Loader for multi-centre datasets laid out on disk as
//! `root/centre<k>/images/*` with masks paired by filename stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;

use super::{imgio, MultiCentreDataset, Sample};
use crate::error::{Error, Result};

/// Where images and masks live and how ids are parsed from filenames.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    /// Centre directories are `<centre_prefix><number>`.
    pub centre_prefix: String,
    pub images_subdir: String,
    pub masks_subdir: String,
    pub image_extensions: Vec<String>,
    pub mask_extensions: Vec<String>,
    /// Appended to the image stem to form the mask stem (e.g. "_mask").
    pub mask_suffix: String,
    /// Regex whose first capture group extracts the patient id from an image
    /// stem. When absent, every stem is its own patient (single-frame data
    /// with no patient annotation).
    pub patient_regex: Option<String>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            centre_prefix: "centre".into(),
            images_subdir: "images".into(),
            masks_subdir: "masks".into(),
            image_extensions: vec!["png".into(), "jpg".into(), "jpeg".into()],
            mask_extensions: vec!["png".into(), "jpg".into(), "jpeg".into()],
            mask_suffix: String::new(),
            patient_regex: None,
        }
    }
}

/// Walks `root/centre<k>/` directories and builds the dataset. Samples are
/// ordered by (centre, filename) so loading is deterministic.
pub fn load_polypgen(root: &Path, layout: &LayoutConfig) -> Result<MultiCentreDataset> {
    let patient_re = layout
        .patient_regex
        .as_deref()
        .map(Regex::new)
        .transpose()
        .map_err(|e| Error::Config(format!("patient_regex: {e}")))?;

    let mut centres: BTreeMap<u32, PathBuf> = BTreeMap::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix(layout.centre_prefix.as_str()) {
            if let Ok(id) = num.parse::<u32>() {
                centres.insert(id, path);
            }
        }
    }
    if centres.is_empty() {
        return Err(Error::Dataset(format!(
            "no centres found under {} (expected directories named {}<number>)",
            root.display(),
            layout.centre_prefix
        )));
    }

    let mut ds = MultiCentreDataset {
        samples: Vec::new(),
        centres: centres.keys().copied().collect(),
        overlay_truth: None,
    };
    for (&centre, centre_dir) in &centres {
        let images_dir = centre_dir.join(&layout.images_subdir);
        let masks_dir = centre_dir.join(&layout.masks_subdir);
        let mut image_files: Vec<PathBuf> = Vec::new();
        let entries = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
            let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase());
            if ext.as_deref().is_some_and(|e| {
                layout.image_extensions.iter().any(|want| want == e)
            }) {
                image_files.push(path);
            }
        }
        image_files.sort();

        for img_path in image_files {
            let stem = img_path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            let mask_path = layout
                .mask_extensions
                .iter()
                .map(|ext| masks_dir.join(format!("{stem}{}.{ext}", layout.mask_suffix)))
                .find(|p| p.exists());
            let mask_path = match mask_path {
                Some(p) => p,
                None => {
                    let first_ext =
                        layout.mask_extensions.first().map(String::as_str).unwrap_or("png");
                    return Err(Error::MissingMask(
                        masks_dir.join(format!("{stem}{}.{first_ext}", layout.mask_suffix)),
                    ));
                }
            };

            let patient_id = match &patient_re {
                Some(re) => re
                    .captures(&stem)
                    .and_then(|c| c.get(1))
                    .map(|m| m.as_str().to_string())
                    .ok_or_else(|| Error::PatientId(img_path.clone()))?,
                None => stem.clone(),
            };

            let image = imgio::load_rgb(&img_path)?;
            let mask = imgio::load_mask(&mask_path)?;
            ds.samples.push(Sample {
                image,
                mask,
                centre,
                // Prefix with the centre so identical stems across centres
                // cannot collide.
                sample_id: format!("c{centre}/{stem}"),
                patient_id: format!("c{centre}/{patient_id}"),
            });
        }
    }
    ds.validate()?;
    Ok(ds)
}

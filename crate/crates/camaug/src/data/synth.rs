//! Synthetic multi-centre dataset with ground-truth overlay annotations.
//!
//! Each image is a tissue-like background with one bright "polyp" ellipse
//! (recorded in the segmentation mask) plus a centre-specific overlay
//! artefact (recorded in overlay_truth): a corner text box, a bright
//! instrument-position widget, or a black miniaturization border. Overlay
//! geometry is constrained so artefacts never intersect the polyp, which is
//! what lets downstream tests reason about saliency placement exactly.
//!
//! All values are quantized to the u8 grid at generation time, so the
//! in-memory dataset and its PNG round-trip are bit-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use super::{imgio, Mask, MultiCentreDataset, Sample};
use crate::error::{Error, Result};
use crate::nn::Fm;
use crate::rng;

/// Overlay artefact drawn for a centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayStyle {
    /// No artefact; overlay_truth is all zeros.
    None,
    /// Dark rectangle with light "text" strokes in a fixed corner.
    CornerText,
    /// Bright disc with a pointer line near one image edge — deliberately
    /// polyp-like in brightness and shape.
    InstrumentWidget,
    /// Black frame around the whole image.
    Border,
}

impl fmt::Display for OverlayStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OverlayStyle::None => "none",
            OverlayStyle::CornerText => "corner_text",
            OverlayStyle::InstrumentWidget => "instrument_widget",
            OverlayStyle::Border => "border",
        };
        f.write_str(s)
    }
}

impl FromStr for OverlayStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OverlayStyle::None),
            "corner_text" => Ok(OverlayStyle::CornerText),
            "instrument_widget" => Ok(OverlayStyle::InstrumentWidget),
            "border" => Ok(OverlayStyle::Border),
            other => Err(Error::Config(format!("unknown overlay style: {other}"))),
        }
    }
}

/// Geometry of the generator, as fractions of the image side. Exposed so
/// tests can bound overlay pixel counts without re-deriving the drawing code.
pub mod geometry {
    /// Polyp centre is confined to this central band.
    pub const POLYP_CENTRE_RANGE: (f64, f64) = (0.38, 0.62);
    /// Polyp semi-axes range.
    pub const POLYP_AXIS_RANGE: (f64, f64) = (0.10, 0.18);
    /// Corner text box width/height ranges and inset.
    pub const TEXTBOX_W_RANGE: (f64, f64) = (0.22, 0.34);
    pub const TEXTBOX_H_RANGE: (f64, f64) = (0.10, 0.16);
    pub const TEXTBOX_INSET: f64 = 0.02;
    /// Instrument widget: centre distance from its edge and radius range.
    pub const WIDGET_EDGE_DIST: f64 = 0.10;
    pub const WIDGET_RADIUS_RANGE: (f64, f64) = (0.05, 0.08);
    /// Border thickness range.
    pub const BORDER_T_RANGE: (f64, f64) = (0.03, 0.06);
    /// Distractor clutter drawn identically for every centre: shape count
    /// per image and size ranges (fractions of the image side).
    pub const DISTRACTOR_COUNT_RANGE: (usize, usize) = (2, 6);
    pub const DISTRACTOR_BLOB_AXIS_RANGE: (f64, f64) = (0.03, 0.08);
    pub const DISTRACTOR_ARC_RADIUS_RANGE: (f64, f64) = (0.08, 0.16);
    pub const DISTRACTOR_SEG_LEN_RANGE: (f64, f64) = (0.06, 0.15);
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Number of centres C (>= 2).
    pub centres: u32,
    pub samples_per_centre: usize,
    /// Samples are distributed round-robin over this many patients per centre.
    pub patients_per_centre: usize,
    /// Square image side in pixels (>= 16).
    pub size: usize,
    /// Overlay style per centre; length must equal `centres`.
    pub styles: Vec<OverlayStyle>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::for_centres(3, 60, 10, 64)
    }
}

impl SynthConfig {
    /// Cycles the three artefact styles across `centres`.
    pub fn for_centres(
        centres: u32,
        samples_per_centre: usize,
        patients_per_centre: usize,
        size: usize,
    ) -> Self {
        let cycle =
            [OverlayStyle::CornerText, OverlayStyle::InstrumentWidget, OverlayStyle::Border];
        let styles = (0..centres).map(|i| cycle[i as usize % cycle.len()]).collect();
        SynthConfig { centres, samples_per_centre, patients_per_centre, size, styles }
    }

    fn validate(&self) -> Result<()> {
        if self.centres < 2 {
            return Err(Error::Config(format!(
                "need at least 2 centres for leave-one-out, got {}",
                self.centres
            )));
        }
        if self.styles.len() != self.centres as usize {
            return Err(Error::Config(format!(
                "{} styles configured for {} centres",
                self.styles.len(),
                self.centres
            )));
        }
        if self.samples_per_centre == 0 || self.patients_per_centre == 0 {
            return Err(Error::Config("samples and patients per centre must be positive".into()));
        }
        if self.patients_per_centre > self.samples_per_centre {
            return Err(Error::Config(format!(
                "more patients ({}) than samples ({}) per centre",
                self.patients_per_centre, self.samples_per_centre
            )));
        }
        if self.size < 16 {
            return Err(Error::Config(format!("image side must be >= 16, got {}", self.size)));
        }
        Ok(())
    }
}

/// Generates the dataset. Deterministic in (config, seed): every sample is
/// drawn from its own named rng stream, so generation order is irrelevant.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<MultiCentreDataset> {
    config.validate()?;
    let mut ds = MultiCentreDataset {
        samples: Vec::with_capacity(config.centres as usize * config.samples_per_centre),
        centres: (1..=config.centres).collect(),
        overlay_truth: Some(BTreeMap::new()),
    };
    for centre in 1..=config.centres {
        let style = config.styles[(centre - 1) as usize];
        for i in 0..config.samples_per_centre {
            let sample_id = format!("c{centre}s{i:04}");
            let patient = i % config.patients_per_centre;
            let patient_id = format!("c{centre}p{patient:03}");
            let mut r = rng::stream(seed, &["synth", &sample_id]);
            let (image, mask, overlay) = draw_sample(config.size, style, centre, &mut r);
            debug_assert!(
                mask.iter().zip(overlay.iter()).all(|(&m, &o)| m * o == 0.0),
                "overlay must not intersect the polyp"
            );
            ds.overlay_truth.as_mut().unwrap().insert(sample_id.clone(), overlay);
            ds.samples.push(Sample { image, mask, centre, patient_id, sample_id });
        }
    }
    ds.validate()?;
    Ok(ds)
}

/// One image: background, polyp, then the centre's overlay artefact.
fn draw_sample(
    size: usize,
    style: OverlayStyle,
    centre: u32,
    r: &mut rand_chacha::ChaCha12Rng,
) -> (Fm, Mask, Mask) {
    let s = size as f64;
    let mut img = background(size, r);
    let mask = draw_polyp(&mut img, size, r);
    let mut overlay = Mask::zeros((size, size));
    match style {
        OverlayStyle::None => {}
        OverlayStyle::CornerText => {
            // Corner fixed per centre so the artefact is a stable signature.
            let corner = (centre as usize) % 4;
            let w = (r.random_range(geometry::TEXTBOX_W_RANGE.0..=geometry::TEXTBOX_W_RANGE.1)
                * s)
                .round() as usize;
            let h = (r.random_range(geometry::TEXTBOX_H_RANGE.0..=geometry::TEXTBOX_H_RANGE.1)
                * s)
                .round() as usize;
            let inset = (geometry::TEXTBOX_INSET * s).round() as usize;
            let (y0, x0) = match corner {
                0 => (inset, inset),
                1 => (inset, size - inset - w),
                2 => (size - inset - h, inset),
                _ => (size - inset - h, size - inset - w),
            };
            draw_textbox(&mut img, &mut overlay, y0, x0, h, w);
        }
        OverlayStyle::InstrumentWidget => {
            // Edge fixed per centre; position jitters along it.
            let edge = (centre as usize) % 4;
            let radius = r
                .random_range(geometry::WIDGET_RADIUS_RANGE.0..=geometry::WIDGET_RADIUS_RANGE.1)
                * s;
            let along = r.random_range(0.3..=0.7) * s;
            let dist = geometry::WIDGET_EDGE_DIST * s;
            let (cy, cx) = match edge {
                0 => (dist, along),             // top
                1 => (s - 1.0 - dist, along),   // bottom
                2 => (along, dist),             // left
                _ => (along, s - 1.0 - dist),   // right
            };
            draw_widget(&mut img, &mut overlay, cy, cx, radius);
        }
        OverlayStyle::Border => {
            let t = (r.random_range(geometry::BORDER_T_RANGE.0..=geometry::BORDER_T_RANGE.1) * s)
                .round()
                .max(1.0) as usize;
            draw_border(&mut img, &mut overlay, t);
        }
    }
    quantize_u8(&mut img);
    (img, mask, overlay)
}

/// Tissue-like background: warm base colour, two low-frequency ramps,
/// per-pixel noise, and a vignette toward the corners.
fn background(size: usize, r: &mut rand_chacha::ChaCha12Rng) -> Fm {
    let s = size as f64;
    let base = [
        r.random_range(0.55..=0.72),
        r.random_range(0.26..=0.40),
        r.random_range(0.28..=0.42),
    ];
    // Two random linear ramps shared by all channels (illumination).
    let (a1, a2) = (r.random_range(0.0..std::f64::consts::TAU), r.random_range(0.0..std::f64::consts::TAU));
    let (g1, g2) = (r.random_range(0.02..=0.08), r.random_range(0.02..=0.08));
    let mut img = Fm::zeros((3, size, size));
    let centre = (s - 1.0) / 2.0;
    let max_d = centre * std::f64::consts::SQRT_2;
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 / s - 0.5, x as f64 / s - 0.5);
            let ramp = g1 * (fx * a1.cos() + fy * a1.sin()) + g2 * (fx * a2.cos() + fy * a2.sin());
            let noise = r.random_range(-0.02..=0.02);
            let d = ((y as f64 - centre).powi(2) + (x as f64 - centre).powi(2)).sqrt() / max_d;
            let vignette = 1.0 - 0.22 * d * d;
            for c in 0..3 {
                img[[c, y, x]] = ((base[c] + ramp + noise) * vignette).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Bright rotated ellipse in the central band; returns its binary mask.
fn draw_polyp(img: &mut Fm, size: usize, r: &mut rand_chacha::ChaCha12Rng) -> Mask {
    let s = size as f64;
    let cy = r.random_range(geometry::POLYP_CENTRE_RANGE.0..=geometry::POLYP_CENTRE_RANGE.1) * s;
    let cx = r.random_range(geometry::POLYP_CENTRE_RANGE.0..=geometry::POLYP_CENTRE_RANGE.1) * s;
    let a = r.random_range(geometry::POLYP_AXIS_RANGE.0..=geometry::POLYP_AXIS_RANGE.1) * s;
    let b = r.random_range(geometry::POLYP_AXIS_RANGE.0..=geometry::POLYP_AXIS_RANGE.1) * s;
    let theta = r.random_range(0.0..std::f64::consts::PI);
    let tint = [
        r.random_range(0.78..=0.88),
        r.random_range(0.48..=0.60),
        r.random_range(0.38..=0.50),
    ];
    let (sin_t, cos_t) = theta.sin_cos();
    let mut mask = Mask::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = (dx * cos_t + dy * sin_t) / a;
            let v = (-dx * sin_t + dy * cos_t) / b;
            let q = u * u + v * v;
            if q <= 1.0 {
                mask[[y, x]] = 1.0;
                // Dome shading: brightest at the middle, blended at the rim.
                let t = 1.0 - q;
                for c in 0..3 {
                    let blend = 0.55 + 0.45 * t;
                    img[[c, y, x]] =
                        (img[[c, y, x]] * (1.0 - blend) + (tint[c] + 0.10 * t) * blend)
                            .clamp(0.0, 1.0);
                }
            }
        }
    }
    mask
}

fn draw_textbox(img: &mut Fm, overlay: &mut Mask, y0: usize, x0: usize, h: usize, w: usize) {
    let (size_y, size_x) = (overlay.shape()[0], overlay.shape()[1]);
    let y1 = (y0 + h).min(size_y);
    let x1 = (x0 + w).min(size_x);
    for y in y0..y1 {
        for x in x0..x1 {
            overlay[[y, x]] = 1.0;
            let v = if y == y0 || y + 1 == y1 || x == x0 || x + 1 == x1 { 0.55 } else { 0.10 };
            for c in 0..3 {
                img[[c, y, x]] = v;
            }
        }
    }
    // Light "text" strokes: horizontal lines at fixed fractions of the box.
    let stroke_h = ((y1 - y0) / 8).max(1);
    for frac in [0.3, 0.6] {
        let sy = y0 + ((h as f64) * frac) as usize;
        for y in sy..(sy + stroke_h).min(y1) {
            for x in (x0 + w / 8)..(x1 - w / 8) {
                for c in 0..3 {
                    img[[c, y, x]] = 0.85;
                }
            }
        }
    }
}

fn draw_widget(img: &mut Fm, overlay: &mut Mask, cy: f64, cx: f64, radius: f64) {
    let (size_y, size_x) = (overlay.shape()[0], overlay.shape()[1]);
    for y in 0..size_y {
        for x in 0..size_x {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d <= radius {
                overlay[[y, x]] = 1.0;
                // Bright dome with a darker ring — deliberately polyp-like.
                let t = 1.0 - d / radius;
                let rim = if d >= radius - 1.5 { 0.35 } else { 0.0 };
                let col = [0.82 + 0.1 * t - rim, 0.80 + 0.12 * t - rim, 0.62 - rim];
                for c in 0..3 {
                    img[[c, y, x]] = col[c].clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn draw_border(img: &mut Fm, overlay: &mut Mask, t: usize) {
    let (size_y, size_x) = (overlay.shape()[0], overlay.shape()[1]);
    for y in 0..size_y {
        for x in 0..size_x {
            if y < t || y >= size_y - t || x < t || x >= size_x - t {
                overlay[[y, x]] = 1.0;
                for c in 0..3 {
                    img[[c, y, x]] = 0.0;
                }
            }
        }
    }
}

/// Snaps every value onto the u8 grid so PNG round-trips are exact.
fn quantize_u8(img: &mut Fm) {
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

// ---------------------------------------------------------------------------
// Persistence: centre<k>/{images,masks,overlay_truth}/<sample_id>.png + manifest.

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    size: usize,
    centres: Vec<u32>,
    styles: Vec<OverlayStyle>,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ManifestEntry {
    sample_id: String,
    centre: u32,
    patient_id: String,
    image: String,
    mask: String,
    overlay_truth: Option<String>,
}

/// Writes the dataset tree and `manifest.json` under `root`.
pub fn save_synthetic(
    ds: &MultiCentreDataset,
    config: &SynthConfig,
    seed: u64,
    root: &Path,
) -> Result<()> {
    let mut manifest = Manifest {
        version: 1,
        seed,
        size: config.size,
        centres: ds.centres.clone(),
        styles: config.styles.clone(),
        samples: Vec::with_capacity(ds.samples.len()),
    };
    for s in &ds.samples {
        let rel_img = format!("centre{}/images/{}.png", s.centre, s.sample_id);
        let rel_mask = format!("centre{}/masks/{}.png", s.centre, s.sample_id);
        imgio::save_rgb(&root.join(&rel_img), &s.image)?;
        imgio::save_mask(&root.join(&rel_mask), &s.mask)?;
        let rel_overlay = match ds.overlay_truth.as_ref().and_then(|t| t.get(&s.sample_id)) {
            Some(ov) => {
                let rel = format!("centre{}/overlay_truth/{}.png", s.centre, s.sample_id);
                imgio::save_mask(&root.join(&rel), ov)?;
                Some(rel)
            }
            None => None,
        };
        manifest.samples.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            centre: s.centre,
            patient_id: s.patient_id.clone(),
            image: rel_img,
            mask: rel_mask,
            overlay_truth: rel_overlay,
        });
    }
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Dataset(format!("serializing manifest: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads a dataset previously written by [`save_synthetic`].
pub fn load_synthetic(root: &Path) -> Result<MultiCentreDataset> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let mut ds = MultiCentreDataset {
        samples: Vec::with_capacity(manifest.samples.len()),
        centres: manifest.centres,
        overlay_truth: Some(BTreeMap::new()),
    };
    for entry in manifest.samples {
        let image = imgio::load_rgb(&root.join(&entry.image))?;
        let mask = imgio::load_mask(&root.join(&entry.mask))?;
        if let Some(rel) = &entry.overlay_truth {
            let ov = imgio::load_mask(&root.join(rel))?;
            ds.overlay_truth.as_mut().unwrap().insert(entry.sample_id.clone(), ov);
        }
        ds.samples.push(Sample {
            image,
            mask,
            centre: entry.centre,
            patient_id: entry.patient_id,
            sample_id: entry.sample_id,
        });
    }
    ds.validate()?;
    Ok(ds)
}

/// Relative path of one sample's image inside a dataset tree (shared by the
/// CLI's preview output naming).
pub fn image_rel_path(sample: &Sample) -> PathBuf {
    PathBuf::from(format!("centre{}/images/{}.png", sample.centre, sample.sample_id))
}

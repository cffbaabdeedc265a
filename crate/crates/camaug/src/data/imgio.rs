//! PNG round-tripping between rasters and disk.
//!
//! Images and masks are stored 8-bit; loaders rescale to f64 in [0, 1].

use std::fs;
use std::path::Path;

use super::Mask;
use crate::error::{Error, Result};
use crate::nn::Fm;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn save_rgb(path: &Path, img: &Fm) -> Result<()> {
    assert_eq!(img.shape()[0], 3, "save_rgb expects 3 channels");
    ensure_parent(path)?;
    let (h, w) = (img.shape()[1] as u32, img.shape()[2] as u32);
    let buf = image::RgbImage::from_fn(w, h, |x, y| {
        let px = |c: usize| {
            (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

pub fn load_rgb(path: &Path) -> Result<Fm> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Fm::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = (mask.shape()[0] as u32, mask.shape()[1] as u32);
    let buf = image::GrayImage::from_fn(w, h, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] > 0.5 { 255u8 } else { 0u8 }])
    });
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Loads a mask, binarizing at mid-grey so slightly lossy sources (e.g.
/// jpeg-compressed annotations) still come back binary.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Mask::zeros((h, w));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = if px.0[0] > 127 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

//! Sobel edge filtering for classifier inputs.
//!
//! The centre classifier trains on edge-magnitude images rather than raw
//! colour so it keys on structural artefacts (overlays, borders, instrument
//! shapes) rather than global colour statistics.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Fm;

/// Gradient-magnitude raster, same spatial size as the source, values in [0,1].
#[derive(Debug, Clone)]
pub struct EdgeImage {
    pub data: Fm,
}

/// Colour handling for [`sobel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobelMode {
    /// Convert to luma (0.299/0.587/0.114), filter once, replicate the
    /// magnitude to 3 channels so downstream consumers keep a 3-channel
    /// input contract. Default.
    GrayscaleFirst,
    /// Filter each channel independently; output keeps the source channel
    /// count. Kept for ablation.
    PerChannel,
}

/// Theoretical maximum gradient magnitude for inputs in [0,1]:
/// |Gx| and |Gy| each peak at 4, so the magnitude peaks at 4*sqrt(2).
pub const SOBEL_MAX_MAGNITUDE: f64 = 5.656854249492381; // 4 * sqrt(2)

/// Sobel gradient magnitude, reflect-padded, rescaled to [0,1] by the
/// theoretical maximum. Input must be at least 3x3.
pub fn sobel(image: &Fm, mode: SobelMode) -> Result<EdgeImage> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "sobel needs at least a 3x3 image, got {h}x{w}"
        )));
    }
    let data = match mode {
        SobelMode::GrayscaleFirst => {
            let gray = match c {
                1 => image.index_axis(ndarray::Axis(0), 0).to_owned(),
                3 => {
                    let r = image.index_axis(ndarray::Axis(0), 0);
                    let g = image.index_axis(ndarray::Axis(0), 1);
                    let b = image.index_axis(ndarray::Axis(0), 2);
                    0.299 * &r + 0.587 * &g + 0.114 * &b
                }
                other => {
                    return Err(Error::Shape(format!(
                        "sobel grayscale-first expects 1 or 3 channels, got {other}"
                    )))
                }
            };
            let mag = magnitude_plane(&gray);
            let mut out = Fm::zeros((3, h, w));
            for mut plane in out.outer_iter_mut() {
                plane.assign(&mag);
            }
            out
        }
        SobelMode::PerChannel => {
            let mut out = Fm::zeros((c, h, w));
            for (ci, plane) in image.outer_iter().enumerate() {
                let mag = magnitude_plane(&plane.to_owned());
                out.index_axis_mut(ndarray::Axis(0), ci).assign(&mag);
            }
            out
        }
    };
    Ok(EdgeImage { data })
}

/// Gradient magnitude of one plane, scaled by 1/(4*sqrt(2)).
///
/// Kernels: Gx = [[-1,0,1],[-2,0,2],[-1,0,1]], Gy = Gx transposed. Each
/// gradient is evaluated as (weighted column/row sum) minus its mirror so a
/// constant input cancels exactly to 0.0 rather than to rounding dust.
fn magnitude_plane(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let at = |dy: isize, dx: isize| -> f64 {
                plane[[reflect(y as isize + dy, h), reflect(x as isize + dx, w)]]
            };
            let (tl, tm, tr) = (at(-1, -1), at(-1, 0), at(-1, 1));
            let (ml, mr) = (at(0, -1), at(0, 1));
            let (bl, bm, br) = (at(1, -1), at(1, 0), at(1, 1));
            let gx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl);
            let gy = (bl + 2.0 * bm + br) - (tl + 2.0 * tm + tr);
            out[[y, x]] = (gx * gx + gy * gy).sqrt() / SOBEL_MAX_MAGNITUDE;
        }
    }
    out
}

/// Mirror an out-of-range index back into [0, n) without repeating the edge
/// sample (the -1 index maps to 1, n maps to n-2).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // One bounce suffices for a 3x3 kernel, but stay general.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

//! Resizing and value normalization.
//!
//! Images resize bilinearly; masks resize nearest-neighbour so they stay
//! binary. Both use the half-pixel-centre convention:
//! `src = (dst + 0.5) * (src_size / dst_size) - 0.5`, clamped to the source.

use ndarray::Array2;

use super::{Mask, Sample};
use crate::nn::Fm;

/// Value normalization applied after resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormConfig {
    /// Keep values in [0, 1] (loader output is already scaled). Default:
    /// every backbone here trains from scratch.
    #[default]
    ZeroOne,
    /// Per-channel (v - mean) / std with the ImageNet statistics; for use
    /// with externally pretrained backbones.
    ImageNet,
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Source coordinate for a destination index under the half-pixel convention.
fn src_coord(dst: usize, scale: f64, src_len: usize) -> f64 {
    let s = (dst as f64 + 0.5) * scale - 0.5;
    s.clamp(0.0, (src_len - 1) as f64)
}

/// Bilinear resize of a (C, H, W) raster to (C, out_h, out_w).
pub fn resize_bilinear(img: &Fm, out_h: usize, out_w: usize) -> Fm {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Fm::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let fy = src_coord(oy, sy, h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = src_coord(ox, sx, w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let top = img[[ci, y0, x0]] * (1.0 - wx) + img[[ci, y0, x1]] * wx;
                let bot = img[[ci, y1, x0]] * (1.0 - wx) + img[[ci, y1, x1]] * wx;
                out[[ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Nearest-neighbour resize of a single plane (used for masks and other
/// binary rasters). Ties round half up toward the larger index.
pub fn resize_nearest(plane: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0);
    if (h, w) == (out_h, out_w) {
        return plane.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = src_coord(oy, sy, h);
        let fx = src_coord(ox, sx, w);
        let y = (fy + 0.5).floor() as usize;
        let x = (fx + 0.5).floor() as usize;
        plane[[y.min(h - 1), x.min(w - 1)]]
    })
}

/// Applies the configured normalization in place.
pub fn normalize(img: &mut Fm, norm: NormConfig) {
    match norm {
        NormConfig::ZeroOne => {}
        NormConfig::ImageNet => {
            for (ci, mut plane) in img.outer_iter_mut().enumerate() {
                let (m, s) = (IMAGENET_MEAN[ci % 3], IMAGENET_STD[ci % 3]);
                plane.mapv_inplace(|v| (v - m) / s);
            }
        }
    }
}

/// Resize an image bilinearly to `size` and normalize per `norm`.
pub fn preprocess(image: &Fm, size: (usize, usize), norm: NormConfig) -> Fm {
    let mut out = resize_bilinear(image, size.0, size.1);
    normalize(&mut out, norm);
    out
}

/// Preprocess a whole sample: image bilinear + normalize, mask nearest.
pub fn preprocess_sample(sample: &Sample, size: (usize, usize), norm: NormConfig) -> Sample {
    Sample {
        image: preprocess(&sample.image, size, norm),
        mask: resize_nearest(&sample.mask, size.0, size.1),
        centre: sample.centre,
        patient_id: sample.patient_id.clone(),
        sample_id: sample.sample_id.clone(),
    }
}

/// Convenience wrapper for resizing a mask.
pub fn resize_mask(mask: &Mask, size: (usize, usize)) -> Mask {
    resize_nearest(mask, size.0, size.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Fm::from_elem((3, 512, 512), 0.37);
        let out = preprocess(&img, (256, 256), NormConfig::ZeroOne);
        assert_eq!(out.shape(), &[3, 256, 256]);
        for &v in out.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    /// Oracle: hand evaluation of the half-pixel formula on a 2x2 -> 4x4
    /// upscale of [[0,1],[0,1]]. Destination columns map to source x of
    /// -0.25, 0.25, 0.75, 1.25 -> clamped 0, 0.25, 0.75, 1, so each output
    /// row is [0, 0.25, 0.75, 1].
    #[test]
    fn two_by_two_upscale_matches_hand_computed_columns() {
        let img = Fm::from_shape_fn((1, 2, 2), |(_, _, x)| x as f64);
        let out = resize_bilinear(&img, 4, 4);
        let expected = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                assert!(
                    (out[[0, y, x]] - expected[x]).abs() < 1e-12,
                    "({y},{x}): {} vs {}",
                    out[[0, y, x]],
                    expected[x]
                );
            }
        }
    }

    /// Oracle: closed-form bilinear at the output corners of a ramp.
    /// For img[y][x] = x / (w-1) on 300x400 -> 256x256, corner (0,0) reads
    /// source x = clamp(0.5 * 400/256 - 0.5) = 0.28125, interpolated value
    /// 0.28125/399; corner x=255 reads 255.5*1.5625-0.5 = 398.59375 ->
    /// 398.59375/399.
    #[test]
    fn ramp_corners_match_analytic_bilinear() {
        let (h, w) = (300usize, 400usize);
        let img = Fm::from_shape_fn((1, h, w), |(_, _, x)| x as f64 / (w - 1) as f64);
        let out = resize_bilinear(&img, 256, 256);
        let sx = w as f64 / 256.0;
        for &ox in &[0usize, 255] {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let expected = fx / (w - 1) as f64;
            assert!(
                (out[[0, 0, ox]] - expected).abs() < 1e-12,
                "corner x={ox}: {} vs {expected}",
                out[[0, 0, ox]]
            );
            assert!((out[[0, 255, ox]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_keeps_masks_binary() {
        let mask = Mask::from_shape_fn((31, 17), |(y, x)| ((y * 31 + x) % 2) as f64);
        let out = resize_nearest(&mask, 256, 256);
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
        let down = resize_nearest(&out, 7, 5);
        assert!(down.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn imagenet_normalization_centres_channels() {
        let mut img = Fm::zeros((3, 2, 2));
        for (ci, mut plane) in img.outer_iter_mut().enumerate() {
            plane.fill(IMAGENET_MEAN[ci]);
        }
        normalize(&mut img, NormConfig::ImageNet);
        for &v in img.iter() {
            assert!(v.abs() < 1e-12, "mean input should normalize to zero, got {v}");
        }
    }

    proptest! {
        /// Bilinear output is bounded by the source value range.
        #[test]
        fn bilinear_never_overshoots(
            seed in 0u64..500,
            h in 2usize..24, w in 2usize..24,
            oh in 1usize..32, ow in 1usize..32,
        ) {
            use rand::Rng;
            use rand_chacha::rand_core::SeedableRng;
            let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let img = Fm::from_shape_fn((1, h, w), |_| r.random::<f64>());
            let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = resize_bilinear(&img, oh, ow);
            for &v in out.iter() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}

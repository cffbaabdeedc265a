//! Standard training-time augmentation: flips, right-angle rotation, and
//! colour jitter. Geometric transforms apply identically to the image, the
//! ground-truth mask, and (when present) the binarized saliency raster;
//! jitter touches the image only.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{Mask, Sample};
use crate::nn::Fm;

/// A sampled geometric transform. Application order: horizontal flip, then
/// vertical flip, then `rot90_k` counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricTransform {
    pub hflip: bool,
    pub vflip: bool,
    /// Quarter turns in [0, 3].
    pub rot90_k: u8,
}

impl GeometricTransform {
    pub const IDENTITY: GeometricTransform =
        GeometricTransform { hflip: false, vflip: false, rot90_k: 0 };

    /// Draws flips at p = 0.5 each and a uniform quarter-turn count.
    /// Draw order is fixed: hflip, vflip, k.
    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        let hflip = rng.random::<f64>() < 0.5;
        let vflip = rng.random::<f64>() < 0.5;
        let rot90_k = rng.random_range(0..4u8);
        GeometricTransform { hflip, vflip, rot90_k }
    }

    pub fn apply_plane(&self, p: &Array2<f64>) -> Array2<f64> {
        let mut out = p.clone();
        if self.hflip {
            out = hflip_plane(&out);
        }
        if self.vflip {
            out = vflip_plane(&out);
        }
        for _ in 0..self.rot90_k {
            out = rot90_plane(&out);
        }
        out
    }

    pub fn apply_channels(&self, x: &Fm) -> Fm {
        let planes: Vec<Array2<f64>> = x
            .outer_iter()
            .map(|p| self.apply_plane(&p.to_owned()))
            .collect();
        let (h, w) = (planes[0].shape()[0], planes[0].shape()[1]);
        let mut out = Fm::zeros((planes.len(), h, w));
        for (ci, plane) in planes.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), ci).assign(plane);
        }
        out
    }
}

/// Mirror left-right: out[y][x] = in[y][W-1-x].
pub fn hflip_plane(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (p.shape()[0], p.shape()[1]);
    Array2::from_shape_fn((h, w), |(y, x)| p[[y, w - 1 - x]])
}

/// Mirror top-bottom: out[y][x] = in[H-1-y][x].
pub fn vflip_plane(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (p.shape()[0], p.shape()[1]);
    Array2::from_shape_fn((h, w), |(y, x)| p[[h - 1 - y, x]])
}

/// Counter-clockwise quarter turn: out[y][x] = in[x][W-1-y].
pub fn rot90_plane(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = (p.shape()[0], p.shape()[1]);
    Array2::from_shape_fn((w, h), |(y, x)| p[[x, w - 1 - y]])
}

/// Sampled colour jitter parameters. Factors of 1 (shift 0) are identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColourJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
}

impl ColourJitter {
    pub const IDENTITY: ColourJitter =
        ColourJitter { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue_shift: 0.0 };

    /// Uniform factors in [0.8, 1.2], hue shift in [-0.05, 0.05] turns.
    /// Draw order: brightness, contrast, saturation, hue.
    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        ColourJitter {
            brightness: rng.random_range(0.8..=1.2),
            contrast: rng.random_range(0.8..=1.2),
            saturation: rng.random_range(0.8..=1.2),
            hue_shift: rng.random_range(-0.05..=0.05),
        }
    }

    /// Applies brightness, contrast, saturation, then hue rotation; output
    /// clamped back to [0, 1].
    pub fn apply(&self, img: &Fm) -> Fm {
        assert_eq!(img.shape()[0], 3, "colour jitter expects RGB");
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let mut out = img.mapv(|v| v * self.brightness);

        // Contrast blends with the mean luma of the (brightness-adjusted) image.
        let mut mean_luma = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean_luma += luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
            }
        }
        mean_luma /= (h * w) as f64;
        out.mapv_inplace(|v| (v - mean_luma) * self.contrast + mean_luma);

        // Saturation blends each pixel with its own luma.
        for y in 0..h {
            for x in 0..w {
                let l = luma(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                for c in 0..3 {
                    out[[c, y, x]] = (out[[c, y, x]] - l) * self.saturation + l;
                }
            }
        }

        if self.hue_shift != 0.0 {
            for y in 0..h {
                for x in 0..w {
                    let (r, g, b) = (out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                    let (hh, s, v) = rgb_to_hsv(r, g, b);
                    let (r2, g2, b2) = hsv_to_rgb((hh + self.hue_shift).rem_euclid(1.0), s, v);
                    out[[0, y, x]] = r2;
                    out[[1, y, x]] = g2;
                    out[[2, y, x]] = b2;
                }
            }
        }
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Hue in turns [0,1), saturation and value in [0,1]. Inputs are clamped.
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (r, g, b) = (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Probability that colour jitter is applied at all.
pub const JITTER_PROB: f64 = 0.30;

/// One augmentation draw for a sample. The geometric transform is applied
/// identically to image, mask, and `cam_bin`; colour jitter (p = 0.30)
/// touches only the image. Draw order: geometric (hflip, vflip, k), jitter
/// coin, then jitter parameters when the coin lands.
pub fn standard_augment(
    sample: &Sample,
    cam_bin: Option<&Mask>,
    rng: &mut ChaCha12Rng,
) -> (Sample, Option<Mask>) {
    if let Some(cb) = cam_bin {
        assert_eq!(
            cb.shape(),
            sample.mask.shape(),
            "cam raster must match the sample's spatial size"
        );
    }
    let g = GeometricTransform::sample(rng);
    let jitter = if rng.random::<f64>() < JITTER_PROB {
        Some(ColourJitter::sample(rng))
    } else {
        None
    };
    apply_augment(sample, cam_bin, g, jitter)
}

/// Deterministic core of [`standard_augment`], usable directly in tests that
/// need to force a specific transform.
pub fn apply_augment(
    sample: &Sample,
    cam_bin: Option<&Mask>,
    g: GeometricTransform,
    jitter: Option<ColourJitter>,
) -> (Sample, Option<Mask>) {
    let mut image = g.apply_channels(&sample.image);
    if let Some(j) = jitter {
        image = j.apply(&image);
    }
    let out = Sample {
        image,
        mask: g.apply_plane(&sample.mask),
        centre: sample.centre,
        patient_id: sample.patient_id.clone(),
        sample_id: sample.sample_id.clone(),
    };
    (out, cam_bin.map(|cb| g.apply_plane(cb)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    fn sample_with_pattern() -> Sample {
        Sample {
            image: Fm::from_shape_fn((3, 6, 6), |(c, y, x)| {
                ((c + 1) * (y * 6 + x)) as f64 / 120.0
            }),
            mask: Mask::from_shape_fn((6, 6), |(y, x)| ((y + x) % 2) as f64),
            centre: 1,
            patient_id: "p1".into(),
            sample_id: "s1".into(),
        }
    }

    #[test]
    fn forced_hflip_mirrors_all_three_rasters_and_is_involutive() {
        let s = sample_with_pattern();
        let cam = Mask::from_shape_fn((6, 6), |(y, _)| (y % 2) as f64);
        let g = GeometricTransform { hflip: true, vflip: false, rot90_k: 0 };
        let (once, cam_once) = apply_augment(&s, Some(&cam), g, None);
        assert_eq!(once.image[[0, 0, 0]], s.image[[0, 0, 5]]);
        assert_eq!(once.mask[[2, 1]], s.mask[[2, 4]]);
        assert_eq!(cam_once.as_ref().unwrap()[[3, 0]], cam[[3, 5]]);
        let (twice, cam_twice) = apply_augment(&once, cam_once.as_ref(), g, None);
        assert_eq!(twice.image, s.image, "double horizontal flip must be identity");
        assert_eq!(twice.mask, s.mask);
        assert_eq!(cam_twice.unwrap(), cam);
    }

    #[test]
    fn identity_transform_returns_input_unchanged() {
        let s = sample_with_pattern();
        let (out, cam) = apply_augment(&s, None, GeometricTransform::IDENTITY, None);
        assert_eq!(out.image, s.image);
        assert_eq!(out.mask, s.mask);
        assert!(cam.is_none());
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let s = sample_with_pattern();
        let g = GeometricTransform { hflip: false, vflip: false, rot90_k: 1 };
        let mut img = s.image.clone();
        for _ in 0..4 {
            img = g.apply_channels(&img);
        }
        assert_eq!(img, s.image);
    }

    #[test]
    fn identity_jitter_changes_nothing() {
        let s = sample_with_pattern();
        let out = ColourJitter::IDENTITY.apply(&s.image);
        for (a, b) in out.iter().zip(s.image.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn brightness_scales_values() {
        let img = Fm::from_elem((3, 2, 2), 0.4);
        let j = ColourJitter { brightness: 1.2, ..ColourJitter::IDENTITY };
        let out = j.apply(&img);
        for &v in out.iter() {
            assert!((v - 0.48).abs() < 1e-12);
        }
    }

    #[test]
    fn saturation_zero_collapses_to_luma() {
        let mut img = Fm::zeros((3, 1, 1));
        img[[0, 0, 0]] = 1.0; // pure red
        let j = ColourJitter { saturation: 0.0, ..ColourJitter::IDENTITY };
        let out = j.apply(&img);
        for c in 0..3 {
            assert!((out[[c, 0, 0]] - 0.299).abs() < 1e-12, "channel {c}");
        }
    }

    #[test]
    fn hue_round_trip_is_stable() {
        for &(r, g, b) in
            &[(0.2, 0.7, 0.4), (0.9, 0.1, 0.05), (0.5, 0.5, 0.5), (0.0, 0.0, 1.0)]
        {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    /// Monte-Carlo check of the documented probabilities under one fixed
    /// seed: flips at 0.50 +/- 0.02, jitter at 0.30 +/- 0.02.
    #[test]
    fn empirical_frequencies_match_contract() {
        let mut rng = ChaCha12Rng::seed_from_u64(20260819);
        let s = sample_with_pattern();
        let n = 10_000;
        let (mut hflips, mut jitters) = (0usize, 0usize);
        for _ in 0..n {
            let g = GeometricTransform::sample(&mut rng);
            if g.hflip {
                hflips += 1;
            }
            if rng.random::<f64>() < JITTER_PROB {
                jitters += 1;
                let _ = ColourJitter::sample(&mut rng);
            }
        }
        let _ = s;
        let hf = hflips as f64 / n as f64;
        let jf = jitters as f64 / n as f64;
        assert!((hf - 0.5).abs() < 0.02, "hflip frequency {hf}");
        assert!((jf - 0.3).abs() < 0.02, "jitter frequency {jf}");
    }

    proptest! {
        /// The same geometric transform lands on image, mask, and cam: a
        /// marked pixel travels to the same coordinates in all three.
        #[test]
        fn geometric_consistency_across_rasters(
            hflip in proptest::bool::ANY,
            vflip in proptest::bool::ANY,
            k in 0u8..4,
            py in 0usize..6,
            px in 0usize..6,
        ) {
            let mut s = sample_with_pattern();
            s.image.fill(0.0);
            s.mask.fill(0.0);
            let mut cam = Mask::zeros((6, 6));
            s.image[[1, py, px]] = 1.0;
            s.mask[[py, px]] = 1.0;
            cam[[py, px]] = 1.0;
            let g = GeometricTransform { hflip, vflip, rot90_k: k };
            let (out, cam_out) = apply_augment(&s, Some(&cam), g, None);
            let cam_out = cam_out.unwrap();
            // Locate the marked pixel in each raster.
            let find = |p: &Mask| -> Result<(usize, usize), TestCaseError> {
                let mut at = None;
                for y in 0..6 {
                    for x in 0..6 {
                        if p[[y, x]] == 1.0 {
                            prop_assert!(at.is_none(), "more than one marked pixel");
                            at = Some((y, x));
                        }
                    }
                }
                Ok(at.expect("marked pixel survived"))
            };
            let m_at = find(&out.mask)?;
            let c_at = find(&cam_out)?;
            let mut img_at = None;
            for y in 0..6 {
                for x in 0..6 {
                    if out.image[[1, y, x]] == 1.0 {
                        img_at = Some((y, x));
                    }
                }
            }
            prop_assert_eq!(m_at, c_at);
            prop_assert_eq!(Some(m_at), img_at);
        }

        /// Augmentation never breaks mask binarity.
        #[test]
        fn mask_stays_binary_under_augmentation(seed in 0u64..300) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let s = sample_with_pattern();
            let (out, _) = standard_augment(&s, None, &mut rng);
            for &v in out.mask.iter() {
                prop_assert!(v == 0.0 || v == 1.0);
            }
            for &v in out.image.iter() {
                prop_assert!((0.0..=1.0).contains(&v), "image left [0,1]: {v}");
            }
        }
    }
}

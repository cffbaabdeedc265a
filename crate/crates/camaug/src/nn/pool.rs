//! Spatial resampling: 2x2 max pooling, global average pooling,
//! and nearest-neighbour 2x upsampling.

use ndarray::Array1;

use super::Fm;

/// 2x2 max pool, stride 2. Requires even height and width.
pub fn max_pool2(x: &Fm) -> Fm {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
    let mut y = Fm::zeros((c, h / 2, w / 2));
    for ci in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let (iy, ix) = (oy * 2, ox * 2);
                let m = x[[ci, iy, ix]]
                    .max(x[[ci, iy, ix + 1]])
                    .max(x[[ci, iy + 1, ix]])
                    .max(x[[ci, iy + 1, ix + 1]]);
                y[[ci, oy, ox]] = m;
            }
        }
    }
    y
}

/// Routes each output gradient to the argmax of its window, recomputed from
/// `x`. Ties go to the first maximal element in row-major window order.
pub fn max_pool2_backward(x: &Fm, dy: &Fm) -> Fm {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut dx = Fm::zeros((c, h, w));
    for ci in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let (iy, ix) = (oy * 2, ox * 2);
                let mut best = (iy, ix);
                let mut best_v = x[[ci, iy, ix]];
                for (dyy, dxx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x[[ci, iy + dyy, ix + dxx]];
                    if v > best_v {
                        best_v = v;
                        best = (iy + dyy, ix + dxx);
                    }
                }
                dx[[ci, best.0, best.1]] += dy[[ci, oy, ox]];
            }
        }
    }
    dx
}

/// Mean over the spatial dims: (C, H, W) -> (C,).
pub fn global_avg_pool(x: &Fm) -> Array1<f64> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let n = (h * w) as f64;
    x.outer_iter().map(|plane| plane.sum() / n).collect()
}

/// Spreads each channel gradient uniformly over H*W positions.
pub fn global_avg_pool_backward(dy: &Array1<f64>, h: usize, w: usize) -> Fm {
    let c = dy.len();
    let n = (h * w) as f64;
    let mut dx = Fm::zeros((c, h, w));
    for (mut plane, &g) in dx.outer_iter_mut().zip(dy.iter()) {
        plane.fill(g / n);
    }
    dx
}

/// Nearest-neighbour 2x upsample: each pixel becomes a 2x2 block.
pub fn upsample_nearest2(x: &Fm) -> Fm {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Fm::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[[ci, iy, ix]];
                y[[ci, 2 * iy, 2 * ix]] = v;
                y[[ci, 2 * iy, 2 * ix + 1]] = v;
                y[[ci, 2 * iy + 1, 2 * ix]] = v;
                y[[ci, 2 * iy + 1, 2 * ix + 1]] = v;
            }
        }
    }
    y
}

/// Adjoint of `upsample_nearest2`: sums each 2x2 block.
pub fn upsample_nearest2_backward(dy: &Fm) -> Fm {
    let (c, h2, w2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Fm::zeros((c, h, w));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                dx[[ci, iy, ix]] = dy[[ci, 2 * iy, 2 * ix]]
                    + dy[[ci, 2 * iy, 2 * ix + 1]]
                    + dy[[ci, 2 * iy + 1, 2 * ix]]
                    + dy[[ci, 2 * iy + 1, 2 * ix + 1]];
            }
        }
    }
    dx
}

//! Elementwise activations and the classification loss head.

use ndarray::{Array1, ArrayD};

use super::Fm;

pub fn relu(x: &Fm) -> Fm {
    x.mapv(|v| v.max(0.0))
}

/// dL/dx given the forward *input* `x`. Uses x > 0 (zero slope at 0).
pub fn relu_backward(x: &Fm, dy: &Fm) -> Fm {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn leaky_relu(x: &Fm, slope: f64) -> Fm {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Fm, dy: &Fm, slope: f64) -> Fm {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn sigmoid(x: &Fm) -> Fm {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// dL/dx from the forward *output* `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Fm, dy: &Fm) -> Fm {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &s| *d *= s * (1.0 - s));
    dx
}

/// Softmax across the channel axis, independently per pixel.
pub fn softmax_channels(x: &Fm) -> Fm {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = x.clone();
    for iy in 0..h {
        for ix in 0..w {
            let mut m = f64::NEG_INFINITY;
            for ci in 0..c {
                m = m.max(y[[ci, iy, ix]]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (y[[ci, iy, ix]] - m).exp();
                y[[ci, iy, ix]] = e;
                z += e;
            }
            for ci in 0..c {
                y[[ci, iy, ix]] /= z;
            }
        }
    }
    y
}

/// dL/dx from the forward *output* `y = softmax_channels(x)`:
/// dx_c = y_c * (dy_c - sum_k y_k dy_k), per pixel.
pub fn softmax_channels_backward(y: &Fm, dy: &Fm) -> Fm {
    let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let mut dx = Fm::zeros((c, h, w));
    for iy in 0..h {
        for ix in 0..w {
            let mut dot = 0.0;
            for ci in 0..c {
                dot += y[[ci, iy, ix]] * dy[[ci, iy, ix]];
            }
            for ci in 0..c {
                dx[[ci, iy, ix]] = y[[ci, iy, ix]] * (dy[[ci, iy, ix]] - dot);
            }
        }
    }
    dx
}

/// Numerically stable softmax cross-entropy on a logit vector.
/// Returns (loss, dL/dlogits) for a one-hot target class.
pub fn softmax_cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    assert!(target < logits.len(), "target class out of range");
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|v| (v - m).exp());
    let z: f64 = exps.sum();
    let loss = z.ln() + m - logits[target];
    let mut grad = exps / z;
    grad[target] -= 1.0;
    (loss, grad)
}

/// Softmax probabilities of a logit vector.
pub fn softmax_vec(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|v| (v - m).exp());
    let z: f64 = exps.sum();
    exps / z
}

/// Elementwise ReLU on a dynamic-rank tensor (used by tests and heads).
pub fn relu_dyn(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr3};

    #[test]
    fn relu_clamps_negatives_and_gates_gradient() {
        let x = arr3(&[[[-1.0, 0.0], [2.0, -0.5]]]);
        let y = relu(&x);
        assert_eq!(y, arr3(&[[[0.0, 0.0], [2.0, 0.0]]]));
        let dy = arr3(&[[[1.0, 1.0], [1.0, 1.0]]]);
        let dx = relu_backward(&x, &dy);
        assert_eq!(dx, arr3(&[[[0.0, 0.0], [1.0, 0.0]]]));
    }

    #[test]
    fn leaky_relu_keeps_negative_slope() {
        let x = arr3(&[[[-2.0, 3.0]]]);
        let y = leaky_relu(&x, 0.01);
        assert_eq!(y, arr3(&[[[-0.02, 3.0]]]));
        let dx = leaky_relu_backward(&x, &arr3(&[[[1.0, 1.0]]]), 0.01);
        assert_eq!(dx, arr3(&[[[0.01, 1.0]]]));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!((sigmoid_scalar(800.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_channels_sums_to_one_per_pixel() {
        let x = arr3(&[[[1.0, 2.0]], [[3.0, -1.0]], [[0.5, 0.0]]]);
        let y = softmax_channels(&x);
        for ix in 0..2 {
            let s: f64 = (0..3).map(|c| y[[c, 0, ix]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_channel_gradient_matches_finite_differences() {
        let x = arr3(&[[[0.3, -1.2]], [[1.7, 0.4]], [[-0.6, 2.0]]]);
        // loss = sum of w_i * softmax(x)_i with fixed weights
        let wts = arr3(&[[[0.9, -0.3]], [[0.1, 1.4]], [[-1.1, 0.2]]]);
        let loss = |x: &Fm| -> f64 { (softmax_channels(x) * &wts).sum() };
        let y = softmax_channels(&x);
        let dx = softmax_channels_backward(&y, &wts);
        let eps = 1e-6;
        for ci in 0..3 {
            for ix in 0..2 {
                let mut xp = x.clone();
                xp[[ci, 0, ix]] += eps;
                let mut xm = x.clone();
                xm[[ci, 0, ix]] -= eps;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
                assert!(
                    (fd - dx[[ci, 0, ix]]).abs() < 1e-8,
                    "c={ci} ix={ix}: fd={fd} an={}",
                    dx[[ci, 0, ix]]
                );
            }
        }
    }

    #[test]
    fn cross_entropy_matches_direct_formula_and_fd() {
        let logits = arr1(&[2.0, -1.0, 0.5]);
        let (loss, grad) = softmax_cross_entropy(&logits, 0);
        let p = softmax_vec(&logits);
        assert!((loss + p[0].ln()).abs() < 1e-12);
        let eps = 1e-6;
        for i in 0..3 {
            let mut lp = logits.clone();
            lp[i] += eps;
            let mut lm = logits.clone();
            lm[i] -= eps;
            let fd =
                (softmax_cross_entropy(&lp, 0).0 - softmax_cross_entropy(&lm, 0).0) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-8, "i={i}");
        }
    }

    #[test]
    fn cross_entropy_survives_huge_logits() {
        let logits = arr1(&[1000.0, -1000.0]);
        let (loss, grad) = softmax_cross_entropy(&logits, 0);
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}

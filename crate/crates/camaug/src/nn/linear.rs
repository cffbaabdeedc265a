//! Fully connected layer on vectors.

use ndarray::{Array1, Ix1, Ix2};
use rand_chacha::ChaCha12Rng;

use super::{he_normal, Param, ParamsMut, ParamsRef};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param, // (out, in)
    pub b: Param, // (out,)
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        Linear {
            w: Param::new(he_normal(&[out_dim, in_dim], in_dim, rng)),
            b: Param::zeros(&[out_dim]),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let w = self.w.val.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.val.view().into_dimensionality::<Ix1>().unwrap();
        w.dot(x) + b
    }

    /// Accumulates parameter grads; returns dL/dx.
    pub fn backward(&mut self, x: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
        {
            let mut dw = self.w.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            for (i, &g) in dy.iter().enumerate() {
                let mut row = dw.row_mut(i);
                row.scaled_add(g, x);
            }
            let mut db = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            db += dy;
        }
        let w = self.w.val.view().into_dimensionality::<Ix2>().unwrap();
        w.t().dot(dy)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }

    pub fn params(&self) -> ParamsRef<'_> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn forward_is_affine_map() {
        let mut r = ChaCha12Rng::seed_from_u64(1);
        let mut lin = Linear::new(2, 2, &mut r);
        lin.w.val = ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn();
        lin.b.val = arr1(&[10.0, 20.0]).into_dyn();
        let y = lin.forward(&arr1(&[1.0, 1.0]));
        assert_eq!(y, arr1(&[13.0, 27.0]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = ChaCha12Rng::seed_from_u64(2);
        let mut lin = Linear::new(3, 2, &mut r);
        let x = arr1(&[0.5, -1.0, 2.0]);
        let loss = |lin: &Linear, x: &Array1<f64>| -> f64 {
            let y = lin.forward(x);
            y[0] * 1.5 - y[1] * 0.25
        };
        let dy = arr1(&[1.5, -0.25]);
        let dx = lin.backward(&x, &dy);
        let eps = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-8, "dx[{i}]");
        }
        for flat in 0..6 {
            let orig = lin.w.val.as_slice().unwrap()[flat];
            lin.w.val.as_slice_mut().unwrap()[flat] = orig + eps;
            let lp = loss(&lin, &x);
            lin.w.val.as_slice_mut().unwrap()[flat] = orig - eps;
            let lm = loss(&lin, &x);
            lin.w.val.as_slice_mut().unwrap()[flat] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let an = lin.w.grad.as_slice().unwrap()[flat];
            assert!((fd - an).abs() < 1e-8, "dw[{flat}]: fd={fd} an={an}");
        }
    }
}

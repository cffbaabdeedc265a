//! Group normalization with learned per-channel scale and shift.
//!
//! Statistics are computed per sample, so results do not depend on batch
//! composition — training, evaluation, and resumed runs all see identical
//! numerics for identical inputs.

use ndarray::Ix1;

use super::{Fm, Param, ParamsMut, ParamsRef};

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Param, // (C,)
    pub beta: Param,  // (C,)
    pub groups: usize,
    pub eps: f64,
}

/// Cached forward state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    /// Normalized activations (before scale/shift).
    pub x_hat: Fm,
    /// Per-group 1/sqrt(var + eps).
    pub inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "channels {channels} not divisible by groups {groups}");
        let mut gamma = Param::zeros(&[channels]);
        gamma.val.fill(1.0);
        GroupNorm { gamma, beta: Param::zeros(&[channels]), groups, eps: 1e-5 }
    }

    pub fn channels(&self) -> usize {
        self.gamma.val.len()
    }

    pub fn forward(&self, x: &Fm) -> (Fm, GroupNormCache) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c, self.channels(), "group norm channel mismatch");
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let mut x_hat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        let gamma = self.gamma.val.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.val.view().into_dimensionality::<Ix1>().unwrap();

        let mut y = Fm::zeros((c, h, w));
        for g in 0..self.groups {
            let lo = g * cg;
            let hi = lo + cg;
            let mut mean = 0.0;
            for ci in lo..hi {
                mean += x_hat.index_axis(ndarray::Axis(0), ci).sum();
            }
            mean /= n;
            let mut var = 0.0;
            for ci in lo..hi {
                for v in x_hat.index_axis(ndarray::Axis(0), ci).iter() {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= n;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for ci in lo..hi {
                let (gm, bt) = (gamma[ci], beta[ci]);
                for iy in 0..h {
                    for ix in 0..w {
                        let xh = (x_hat[[ci, iy, ix]] - mean) * is;
                        x_hat[[ci, iy, ix]] = xh;
                        y[[ci, iy, ix]] = gm * xh + bt;
                    }
                }
            }
        }
        (y, GroupNormCache { x_hat, inv_std })
    }

    /// Accumulates gamma/beta grads; returns dL/dx.
    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Fm) -> Fm {
        let (c, h, w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        let cg = c / self.groups;
        let n = (cg * h * w) as f64;
        let gamma = self.gamma.val.view().into_dimensionality::<Ix1>().unwrap();
        let mut dx = Fm::zeros((c, h, w));

        {
            let mut dgamma = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            let mut dbeta = self.beta.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for ci in 0..c {
                let mut dg = 0.0;
                let mut db = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        dg += dy[[ci, iy, ix]] * cache.x_hat[[ci, iy, ix]];
                        db += dy[[ci, iy, ix]];
                    }
                }
                dgamma[ci] += dg;
                dbeta[ci] += db;
            }
        }

        for g in 0..self.groups {
            let lo = g * cg;
            let hi = lo + cg;
            let is = cache.inv_std[g];
            // dxhat = gamma * dy; reduce over the group.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in lo..hi {
                for iy in 0..h {
                    for ix in 0..w {
                        let dxh = gamma[ci] * dy[[ci, iy, ix]];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * cache.x_hat[[ci, iy, ix]];
                    }
                }
            }
            let m1 = sum_dxhat / n;
            let m2 = sum_dxhat_xhat / n;
            for ci in lo..hi {
                for iy in 0..h {
                    for ix in 0..w {
                        let dxh = gamma[ci] * dy[[ci, iy, ix]];
                        dx[[ci, iy, ix]] = is * (dxh - m1 - cache.x_hat[[ci, iy, ix]] * m2);
                    }
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }

    pub fn params(&self) -> ParamsRef<'_> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }
}

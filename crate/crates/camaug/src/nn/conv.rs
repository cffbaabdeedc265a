//! 2-D convolution via im2col + matrix multiply.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Ix1, Ix4};
use rand_chacha::ChaCha12Rng;

use super::{he_normal, Fm, Param, ParamsMut, ParamsRef};

/// Convolution over (C, H, W) maps. Square kernels; zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // (out, in, k, k)
    pub b: Param, // (out,)
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self::with_dilation(in_ch, out_ch, k, stride, padding, 1, rng)
    }

    pub fn with_dilation(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(stride >= 1 && dilation >= 1 && k >= 1);
        let fan_in = in_ch * k * k;
        Conv2d {
            w: Param::new(he_normal(&[out_ch, in_ch, k, k], fan_in, rng)),
            b: Param::zeros(&[out_ch]),
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.w.val.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.w.val.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w.val.shape()[2]
    }

    /// Spatial output size for an input of `(h, w)`.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k_eff = self.dilation * (self.kernel() - 1) + 1;
        let oh = (h + 2 * self.padding).checked_sub(k_eff).expect("kernel larger than padded input") / self.stride + 1;
        let ow = (w + 2 * self.padding).checked_sub(k_eff).expect("kernel larger than padded input") / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &Fm) -> Fm {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c, self.in_ch(), "conv input channel mismatch");
        let (oh, ow) = self.out_size(h, w);
        let o = self.out_ch();
        let k = self.kernel();
        let wmat = self
            .w
            .val
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((o, c * k * k))
            .unwrap();

        // 1x1 stride-1 convolution is a plain channel mix; skip im2col.
        let y_mat: Array2<f64> = if k == 1 && self.stride == 1 && self.padding == 0 {
            let x_mat = flatten_hw(&x.view());
            wmat.dot(&x_mat)
        } else {
            let cols = im2col(&x.view(), k, self.stride, self.padding, self.dilation, oh, ow);
            wmat.dot(&cols)
        };

        let mut y = standardize(y_mat).into_shape_with_order((o, oh, ow)).unwrap();
        let bias = self.b.val.view().into_dimensionality::<Ix1>().unwrap();
        for (mut plane, &bv) in y.outer_iter_mut().zip(bias.iter()) {
            plane += bv;
        }
        y
    }

    /// Accumulates dW/db into this layer's grads and returns dL/dx.
    /// `x` must be the same input that produced the forward pass.
    pub fn backward(&mut self, x: &Fm, dy: &Fm) -> Fm {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        assert_eq!(o, self.out_ch());
        let k = self.kernel();
        debug_assert_eq!((oh, ow), self.out_size(h, w));

        let dy_mat = flatten_hw(&dy.view());

        // db
        {
            let mut db = self.b.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for (g, row) in db.iter_mut().zip(dy_mat.outer_iter()) {
                *g += row.sum();
            }
        }

        if k == 1 && self.stride == 1 && self.padding == 0 {
            let x_mat = flatten_hw(&x.view());
            let dw = dy_mat.dot(&x_mat.t());
            let dx_mat = {
                let wmat = self
                    .w
                    .val
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .into_shape_with_order((o, c * k * k))
                    .unwrap();
                wmat.t().dot(&dy_mat)
            };
            accumulate_dw(&mut self.w, &dw);
            return standardize(dx_mat).into_shape_with_order((c, h, w)).unwrap();
        }

        let cols = im2col(&x.view(), k, self.stride, self.padding, self.dilation, oh, ow);
        let dw = dy_mat.dot(&cols.t()); // (o, c*k*k)
        let dcols = {
            let wmat = self
                .w
                .val
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .into_shape_with_order((o, c * k * k))
                .unwrap();
            standardize(wmat.t().dot(&dy_mat)) // (c*k*k, oh*ow)
        };
        accumulate_dw(&mut self.w, &dw);
        col2im(&dcols, c, h, w, k, self.stride, self.padding, self.dilation, oh, ow)
    }

    pub fn params_mut(&mut self) -> ParamsMut<'_> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }

    pub fn params(&self) -> ParamsRef<'_> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }
}

fn accumulate_dw(w: &mut Param, dw: &Array2<f64>) {
    // Reshape the grad buffer (always standard layout) rather than `dw`,
    // whose layout depends on how `dot` produced it.
    let mut g = w
        .grad
        .view_mut()
        .into_shape_with_order((dw.nrows(), dw.ncols()))
        .expect("grad buffer is standard layout");
    g += dw;
}

/// `dot` yields a column-major result when the contraction length is 1
/// (e.g. a 1x1 kernel over a 1x1 feature map); normalize so the reshapes
/// and slice views downstream stay valid.
fn standardize(m: Array2<f64>) -> Array2<f64> {
    if m.is_standard_layout() {
        m
    } else {
        let mut out = Array2::zeros(m.raw_dim());
        out.assign(&m);
        out
    }
}

/// View (C, H, W) as (C, H*W) without copying.
fn flatten_hw<'a>(x: &ArrayView3<'a, f64>) -> ArrayView2<'a, f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.clone()
        .into_shape_with_order((c, h * w))
        .expect("feature map must be standard layout")
}

/// Unfold `x` into a (C*k*k, oh*ow) patch matrix with zero padding.
pub fn im2col(
    x: &ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xs = x.as_slice().expect("feature map must be standard layout");
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    let cs = cols.as_slice_mut().unwrap();

    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue; // stays zero
                    }
                    let x_base = (ci * h + iy as usize) * w;
                    let out_base = row_base + oy * ow;
                    if stride == 1 {
                        // ix = ox + kj*dilation - padding: contiguous in ox.
                        let off = kj as isize * dilation as isize - padding as isize;
                        let ox_lo = (-off).max(0) as usize;
                        let ox_hi = ow.min(((w as isize) - off).max(0) as usize);
                        if ox_lo < ox_hi {
                            let src_lo = (ox_lo as isize + off) as usize;
                            cs[out_base + ox_lo..out_base + ox_hi]
                                .copy_from_slice(&xs[x_base + src_lo..x_base + src_lo + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[out_base + ox] = xs[x_base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input: adjoint of `im2col`.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let ds = dcols.as_slice().expect("gradient matrix must be standard layout");

    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_base = (ci * h + iy as usize) * w;
                    let out_base = row_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dxs[x_base + ix as usize] += ds[out_base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

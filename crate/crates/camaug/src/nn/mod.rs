//! Minimal CPU neural-network substrate: f64 tensors, explicit
//! forward/backward per layer, Adam, and a named-tensor blob format.
//!
//! Layers operate on single samples in (C, H, W) layout. Normalization is
//! per-sample (group norm), so a batch is purely an optimizer-accumulation
//! concept: samples pass through independently and gradients are summed in
//! sample order, which keeps runs bit-reproducible.

pub mod act;
pub mod adam;
pub mod blocks;
pub mod blob;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use act::{leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward};
pub use adam::Adam;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::GroupNorm;

use ndarray::{Array3, ArrayD};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Feature map: channels × height × width.
pub type Fm = Array3<f64>;

/// A trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub val: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(val: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(val.raw_dim());
        Param { val, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(shape.to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.val.is_empty()
    }
}

/// Named references to a model's parameters, in a stable construction order.
pub type ParamsMut<'a> = Vec<(String, &'a mut Param)>;
pub type ParamsRef<'a> = Vec<(String, &'a Param)>;

/// He-normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/product mismatch")
}

/// Sum of parameter element counts.
pub fn count_params(params: &ParamsRef<'_>) -> usize {
    params.iter().map(|(_, p)| p.len()).sum()
}

/// Stack two feature maps along the channel axis: (A, H, W) + (B, H, W) ->
/// (A + B, H, W).
pub fn concat_channels(a: &Fm, b: &Fm) -> Fm {
    assert_eq!(&a.shape()[1..], &b.shape()[1..], "concat operands must share spatial dims");
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()])
        .expect("channel concatenation of shape-checked maps")
}

/// Inverse of [`concat_channels`]: split off the first `c_first` channels.
pub fn split_channels(x: &Fm, c_first: usize) -> (Fm, Fm) {
    assert!(c_first <= x.shape()[0], "split point beyond channel count");
    let a = x.slice(ndarray::s![..c_first, .., ..]).to_owned();
    let b = x.slice(ndarray::s![c_first.., .., ..]).to_owned();
    (a, b)
}

/// Prefix every name in `params` with `prefix.`.
pub fn with_prefix<'a>(prefix: &str, params: ParamsMut<'a>) -> ParamsMut<'a> {
    params
        .into_iter()
        .map(|(name, p)| (format!("{prefix}.{name}"), p))
        .collect()
}

pub fn with_prefix_ref<'a>(prefix: &str, params: ParamsRef<'a>) -> ParamsRef<'a> {
    params.into_iter().map(|(name, p)| (format!("{prefix}.{name}"), p)).collect()
}

//! Weight initialization.
//!
//! All draws happen in f64 and convert afterwards, so a run is reproducible
//! across scalar types.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::scalar::{s, Scalar};
use super::tensor::Tensor;

pub fn uniform<S: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
    let dist = Uniform::new(lo, hi);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| s::<S>(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

pub fn normal<S: Scalar>(rng: &mut impl Rng, shape: &[usize], mean: f64, std: f64) -> Tensor<S> {
    let dist = Normal::new(mean, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| s::<S>(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Glorot uniform: limit √(6 / (fan_in + fan_out)). Fans are passed
/// explicitly so convolution kernels can account for their taps.
pub fn xavier_uniform<S: Scalar>(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, -limit, limit)
}

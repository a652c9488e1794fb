//! Seeded weight initialization.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};

/// He-style normal init: N(0, sqrt(2 / fan_in)). Samples are drawn in f64 so
/// f32 and f64 instantiations of the same model start from identical values.
pub fn he_normal<A: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<A> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_shape_simple_fn(IxDyn(shape), || A::from_f64_c(dist.sample(rng)))
}

/// Uniform init on [-bound, bound].
pub fn uniform<A: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<A> {
    Tensor::from_shape_simple_fn(IxDyn(shape), || A::from_f64_c(rng.gen_range(-bound..bound)))
}

pub fn zeros<A: Scalar>(shape: &[usize]) -> Tensor<A> {
    Tensor::zeros(IxDyn(shape))
}

pub fn ones<A: Scalar>(shape: &[usize]) -> Tensor<A> {
    Tensor::from_elem(IxDyn(shape), A::one())
}

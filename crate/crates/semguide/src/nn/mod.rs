//! Minimal feed-forward network toolkit: layers with explicit forward and
//! backward passes over `ndarray` tensors.
//!
//! Everything is generic over [`Scalar`] so the same layer code trains in
//! `f32` and gradient-checks against central finite differences in `f64`.
//! Batch work is split into fixed-size sample chunks; chunk boundaries never
//! depend on thread count, so results are bit-identical regardless of
//! parallel scheduling.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub mod act;
pub mod check;
pub mod conv;
pub mod dense;
pub mod init;
pub mod norm;
pub mod pool;
pub mod sge;
pub mod splat;

pub use act::{Relu, Sigmoid};
pub use conv::{Conv2d, ConvTranspose2d};
pub use dense::Linear;
pub use norm::InstanceNorm;
pub use pool::GlobalAvgPool;
pub use sge::Sge;
pub use splat::SplitAttention;

/// Element type for all tensors: implemented by `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + AddAssign
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn from_usize_c(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dynamic-rank tensor.
pub type Tensor<A> = ArrayD<A>;

/// A trainable value plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<A: Scalar> {
    pub value: Tensor<A>,
    pub grad: Tensor<A>,
}

impl<A: Scalar> Param<A> {
    pub fn new(value: Tensor<A>) -> Self {
        let grad = Tensor::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(A::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// A differentiable computation stage.
///
/// `forward` with `train = true` caches whatever `backward` needs; `backward`
/// consumes the most recent cached activation, accumulates parameter
/// gradients, and returns the gradient with respect to the input.
pub trait Layer<A: Scalar>: Send {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A>;

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A>;

    /// Visits every parameter as `(dotted.name, param)`. Order is fixed by
    /// construction and must be stable across runs: checkpoints and the
    /// optimizer key off it.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        let _ = (prefix, f);
    }
}

/// Ordered sequence of layers with dotted parameter names.
pub struct Sequential<A: Scalar> {
    layers: Vec<(String, Box<dyn Layer<A>>)>,
}

impl<A: Scalar> Default for Sequential<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> Sequential<A> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer<A> + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer<A>>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<A: Scalar> Layer<A> for Sequential<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let mut cur = x.clone();
        for (_, layer) in self.layers.iter_mut() {
            cur = layer.forward(&cur, train);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let mut cur = grad_out.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        for (name, layer) in self.layers.iter_mut() {
            let child = if prefix.is_empty() {
                name.clone()
            } else {
                format!("{prefix}.{name}")
            };
            layer.visit_params(&child, f);
        }
    }
}

/// Chunk width used when splitting a batch for parallel processing. Fixed so
/// numerical results do not depend on the executing thread pool.
pub const BATCH_CHUNK: usize = 8;

/// Splits `0..n` into `BATCH_CHUNK`-sized half-open ranges.
pub fn batch_chunks(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + BATCH_CHUNK).min(n);
        out.push((start, end));
        start = end;
    }
    out
}

/// Total number of parameters reachable from a layer.
pub fn parameter_count<A: Scalar>(layer: &mut dyn Layer<A>) -> usize {
    let mut n = 0;
    layer.visit_params("", &mut |_, p| n += p.len());
    n
}

/// Zeroes every gradient reachable from a layer.
pub fn zero_grads<A: Scalar>(layer: &mut dyn Layer<A>) {
    layer.visit_params("", &mut |_, p| p.zero_grad());
}

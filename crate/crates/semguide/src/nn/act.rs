//! Elementwise activations.

use super::{Layer, Param, Scalar, Tensor};

pub fn sigmoid<A: Scalar>(v: A) -> A {
    // split on sign to avoid overflow in exp
    if v >= A::zero() {
        A::one() / (A::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (A::one() + e)
    }
}

/// Rectifier.
pub struct Relu<A: Scalar> {
    cache_mask: Option<Tensor<A>>,
}

impl<A: Scalar> Relu<A> {
    pub fn new() -> Self {
        Self { cache_mask: None }
    }
}

impl<A: Scalar> Default for Relu<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> Layer<A> for Relu<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let y = x.mapv(|v| if v > A::zero() { v } else { A::zero() });
        if train {
            self.cache_mask = Some(x.mapv(|v| if v > A::zero() { A::one() } else { A::zero() }));
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let mask = self.cache_mask.take().expect("relu backward without forward");
        grad_out * &mask
    }
}

/// Elementwise logistic gate.
pub struct Sigmoid<A: Scalar> {
    cache_y: Option<Tensor<A>>,
}

impl<A: Scalar> Sigmoid<A> {
    pub fn new() -> Self {
        Self { cache_y: None }
    }
}

impl<A: Scalar> Default for Sigmoid<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> Layer<A> for Sigmoid<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let y = x.mapv(sigmoid);
        if train {
            self.cache_y = Some(y.clone());
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let y = self.cache_y.take().expect("sigmoid backward without forward");
        grad_out * &y.mapv(|v| v * (A::one() - v))
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param<A>)) {}
}

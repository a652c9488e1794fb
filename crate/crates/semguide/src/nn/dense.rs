//! Fully connected layer over `[b, features]`.

use ndarray::{Axis, Ix2};
use rand_chacha::ChaCha8Rng;

use super::init::{he_normal, zeros};
use super::{Layer, Param, Scalar, Tensor};

pub struct Linear<A: Scalar> {
    pub weight: Param<A>, // [out, in]
    pub bias: Param<A>,   // [out]
    cache_x: Option<Tensor<A>>,
}

impl<A: Scalar> Linear<A> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new(he_normal(&[out_features, in_features], in_features, rng)),
            bias: Param::new(zeros(&[out_features])),
            cache_x: None,
        }
    }
}

impl<A: Scalar> Layer<A> for Linear<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let x2 = x.view().into_dimensionality::<Ix2>().expect("linear expects [b, features]");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x2.dot(&w.t());
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &bias;
        if train {
            self.cache_x = Some(x.clone());
        }
        y.into_dyn()
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let x = self
            .cache_x
            .take()
            .expect("linear backward without forward")
            .into_dimensionality::<Ix2>()
            .unwrap();
        let dy = grad_out.view().into_dimensionality::<Ix2>().unwrap();
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        {
            let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
            wg += &dy.t().dot(&x);
            let mut bg = self.bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            bg += &dy.sum_axis(Axis(0));
        }
        dy.dot(&w).into_dyn()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

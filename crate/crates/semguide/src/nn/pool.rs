//! Spatial pooling.

use ndarray::{Array2, Array4, Ix4};

use super::{Layer, Scalar, Tensor};

/// Mean over spatial positions: `[b, c, h, w] -> [b, c]`.
pub fn global_avg_pool<A: Scalar>(x: &Tensor<A>) -> Tensor<A> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("expects [b,c,h,w]");
    let (b, c, h, w) = x4.dim();
    let n = A::from_usize_c(h * w);
    let mut y = Array2::<A>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            y[[bi, ci]] = x4.slice(ndarray::s![bi, ci, .., ..]).sum() / n;
        }
    }
    y.into_dyn()
}

/// Layer wrapper around [`global_avg_pool`].
pub struct GlobalAvgPool {
    cache_shape: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { cache_shape: None }
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Scalar> Layer<A> for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("expects [b,c,h,w]");
        if train {
            self.cache_shape = Some(x4.dim());
        }
        global_avg_pool(x)
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let (b, c, h, w) = self.cache_shape.take().expect("pool backward without forward");
        let dy = grad_out.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let n = A::from_usize_c(h * w);
        let mut dx = Array4::<A>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(dy[[bi, ci]] / n);
            }
        }
        dx.into_dyn()
    }
}

//! Instance normalization: per-sample, per-channel spatial standardization
//! with an optional learned affine.

use ndarray::{s, Array4, Ix4};

use super::init::{ones, zeros};
use super::{Layer, Param, Scalar, Tensor};

/// Functional form. `affine` supplies per-channel `(gamma, beta)`.
///
/// Each `(sample, channel)` plane is standardized to zero mean and unit
/// variance over its spatial positions; `eps` guards zero-variance planes, so
/// a constant channel maps to all zeros pre-affine.
pub fn instance_normalize<A: Scalar>(
    x: &Tensor<A>,
    eps: A,
    affine: Option<(&[A], &[A])>,
) -> Tensor<A> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("expects [b,c,h,w]");
    let (b, c, h, w) = x4.dim();
    let n = A::from_usize_c(h * w);
    let mut y = Array4::<A>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x4.slice(s![bi, ci, .., ..]);
            let mean = plane.sum() / n;
            let var = plane.fold(A::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let inv_std = A::one() / (var + eps).sqrt();
            let (g, be) = match affine {
                Some((gamma, beta)) => (gamma[ci], beta[ci]),
                None => (A::one(), A::zero()),
            };
            let mut out = y.slice_mut(s![bi, ci, .., ..]);
            out.assign(&plane.mapv(|v| (v - mean) * inv_std * g + be));
        }
    }
    y.into_dyn()
}

/// Learnable instance-norm layer over `[b, c, h, w]`.
pub struct InstanceNorm<A: Scalar> {
    pub gamma: Param<A>,
    pub beta: Param<A>,
    pub eps: A,
    pub affine: bool,
    channels: usize,
    cache: Option<NormCache<A>>,
}

struct NormCache<A: Scalar> {
    x_hat: Array4<A>,
    inv_std: ndarray::Array2<A>,
}

impl<A: Scalar> InstanceNorm<A> {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            gamma: Param::new(ones(&[channels])),
            beta: Param::new(zeros(&[channels])),
            eps: A::from_f64_c(1e-5),
            affine,
            channels,
            cache: None,
        }
    }
}

impl<A: Scalar> Layer<A> for InstanceNorm<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("expects [b,c,h,w]");
        let (b, c, h, w) = x4.dim();
        assert_eq!(c, self.channels, "instance norm channel mismatch");
        assert!(h * w >= 2, "instance norm needs at least two spatial positions");
        let n = A::from_usize_c(h * w);
        let mut x_hat = Array4::<A>::zeros((b, c, h, w));
        let mut inv_std = ndarray::Array2::<A>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let plane = x4.slice(s![bi, ci, .., ..]);
                let mean = plane.sum() / n;
                let var = plane.fold(A::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
                let istd = A::one() / (var + self.eps).sqrt();
                inv_std[[bi, ci]] = istd;
                x_hat
                    .slice_mut(s![bi, ci, .., ..])
                    .assign(&plane.mapv(|v| (v - mean) * istd));
            }
        }
        let mut y = x_hat.clone();
        if self.affine {
            let gamma = &self.gamma.value;
            let beta = &self.beta.value;
            for ci in 0..c {
                let (g, be) = (gamma[[ci]], beta[[ci]]);
                y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * g + be);
            }
        }
        if train {
            self.cache = Some(NormCache { x_hat, inv_std });
        }
        y.into_dyn()
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let cache = self.cache.take().expect("instance norm backward without forward");
        let dy = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = dy.dim();
        let n = A::from_usize_c(h * w);
        let mut dx = Array4::<A>::zeros((b, c, h, w));
        for ci in 0..c {
            let g = if self.affine {
                self.gamma.value[[ci]]
            } else {
                A::one()
            };
            let mut dgamma = A::zero();
            let mut dbeta = A::zero();
            for bi in 0..b {
                let dyp = dy.slice(s![bi, ci, .., ..]);
                let xh = cache.x_hat.slice(s![bi, ci, .., ..]);
                let istd = cache.inv_std[[bi, ci]];
                // d x_hat = g * dy; standard normalization backward:
                // dx = istd/n * (n*dxh - sum(dxh) - x_hat * sum(dxh * x_hat))
                let sum_dxh = dyp.sum() * g;
                let sum_dxh_xh = dyp
                    .iter()
                    .zip(xh.iter())
                    .fold(A::zero(), |acc, (&d, &x)| acc + d * g * x);
                let mut dxp = dx.slice_mut(s![bi, ci, .., ..]);
                ndarray::Zip::from(&mut dxp).and(&dyp).and(&xh).for_each(|o, &d, &x| {
                    *o = istd / n * (n * d * g - sum_dxh - x * sum_dxh_xh);
                });
                dgamma += dyp
                    .iter()
                    .zip(xh.iter())
                    .fold(A::zero(), |acc, (&d, &x)| acc + d * x);
                dbeta += dyp.sum();
            }
            if self.affine {
                self.gamma.grad[[ci]] += dgamma;
                self.beta.grad[[ci]] += dbeta;
            }
        }
        dx.into_dyn()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        if self.affine {
            f(&format!("{prefix}.gamma"), &mut self.gamma);
            f(&format!("{prefix}.beta"), &mut self.beta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::<f64>::from_elem(IxDyn(&[1, 2, 4, 4]), 3.5);
        let y = instance_normalize(&x, 1e-5, None);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn output_statistics_are_standardized() {
        let mut rng = 1234u64;
        let mut next = || {
            // xorshift, plenty for test data
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng % 10_000) as f64 / 1000.0 - 5.0
        };
        let x = Tensor::<f64>::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), &mut next);
        let y = instance_normalize(&x, 1e-5, None);
        let y4 = y.view().into_dimensionality::<Ix4>().unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let plane = y4.slice(s![b, c, .., ..]);
                let mean = plane.mean().unwrap();
                let var = plane.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / 64.0;
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn identity_affine_matches_plain() {
        let x = Tensor::<f64>::from_shape_fn(IxDyn(&[1, 2, 3, 3]), |ix| {
            (ix[1] * 9 + ix[2] * 3 + ix[3]) as f64 * 0.37 - 1.0
        });
        let gamma = vec![1.0, 1.0];
        let beta = vec![0.0, 0.0];
        let a = instance_normalize(&x, 1e-5, None);
        let b = instance_normalize(&x, 1e-5, Some((&gamma, &beta)));
        assert_eq!(a, b);
    }
}

//! Spatial group-wise enhancement: gates each spatial position of a channel
//! group by its similarity to the group's pooled descriptor.
//!
//! Per group: pool the spatial mean vector, take the dot product with every
//! position's feature vector, standardize those similarities over space
//! (eps-guarded), apply the per-group affine, and squash through a sigmoid.
//! The input is scaled elementwise by the resulting gate.

use ndarray::{Array2, Array4, ArrayView2, Ix4};

use super::act::sigmoid;
use super::init::{ones, zeros};
use super::{Layer, Param, Scalar, Tensor};
use crate::error::{Error, Result};

/// Plain-data parameters of an SGE gate.
#[derive(Debug, Clone)]
pub struct SgeParams<A: Scalar> {
    pub groups: usize,
    pub gamma: Vec<A>,
    pub beta: Vec<A>,
    pub eps: A,
}

impl<A: Scalar> SgeParams<A> {
    /// Identity-leaning defaults: gamma 1, beta 0, eps 1e-5.
    pub fn with_groups(groups: usize) -> Self {
        Self {
            groups,
            gamma: vec![A::one(); groups],
            beta: vec![A::zero(); groups],
            eps: A::from_f64_c(1e-5),
        }
    }
}

/// Checked functional form of the SGE gate.
pub fn sge_enhance<A: Scalar>(x: &Tensor<A>, params: &SgeParams<A>) -> Result<Tensor<A>> {
    let x4 = x
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::Shape("sge expects [b,c,h,w]".into()))?;
    let channels = x4.shape()[1];
    if params.eps <= A::zero() {
        return Err(Error::Config("sge eps must be positive".into()));
    }
    if channels % params.groups != 0 {
        return Err(Error::Shape(format!(
            "channel count {channels} not divisible by {} groups",
            params.groups
        )));
    }
    let mut layer = Sge::from_params(params.clone());
    Ok(layer.forward(x, false))
}

/// Learnable SGE layer.
pub struct Sge<A: Scalar> {
    pub gamma: Param<A>, // [groups]
    pub beta: Param<A>,  // [groups]
    pub eps: A,
    groups: usize,
    cache: Option<SgeCache<A>>,
}

struct SgeCache<A: Scalar> {
    x: Array4<A>,
    pooled: ndarray::Array3<A>,  // [b, groups, c_per]
    a_norm: Array4<A>,           // [b, groups, h, w] stored as [b,g,h,w]
    inv_std: Array2<A>,          // [b, groups]
    gate: Array4<A>,             // [b, groups, h, w]
}

impl<A: Scalar> Sge<A> {
    pub fn new(groups: usize) -> Self {
        Self {
            gamma: Param::new(ones(&[groups])),
            beta: Param::new(zeros(&[groups])),
            eps: A::from_f64_c(1e-5),
            groups,
            cache: None,
        }
    }

    pub fn from_params(params: SgeParams<A>) -> Self {
        let mut layer = Self::new(params.groups);
        for (i, g) in params.gamma.iter().enumerate() {
            layer.gamma.value[[i]] = *g;
        }
        for (i, b) in params.beta.iter().enumerate() {
            layer.beta.value[[i]] = *b;
        }
        layer.eps = params.eps;
        layer
    }

    pub fn groups(&self) -> usize {
        self.groups
    }
}

impl<A: Scalar> Layer<A> for Sge<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let x4 = x
            .view()
            .into_dimensionality::<Ix4>()
            .expect("sge expects [b,c,h,w]")
            .to_owned();
        let (b, c, h, w) = x4.dim();
        assert_eq!(c % self.groups, 0, "channels not divisible by groups");
        let cg = c / self.groups;
        let spatial = h * w;
        let nf = A::from_usize_c(spatial);

        let mut pooled = ndarray::Array3::<A>::zeros((b, self.groups, cg));
        let mut a_norm = Array4::<A>::zeros((b, self.groups, h, w));
        let mut inv_std = Array2::<A>::zeros((b, self.groups));
        let mut gate = Array4::<A>::zeros((b, self.groups, h, w));
        let mut y = x4.clone();

        for bi in 0..b {
            for g in 0..self.groups {
                let group: ArrayView2<A> = x4
                    .slice(ndarray::s![bi, g * cg..(g + 1) * cg, .., ..])
                    .into_shape_with_order((cg, spatial))
                    .unwrap();
                for ci in 0..cg {
                    let mean_c = group.row(ci).sum() / nf;
                    pooled[[bi, g, ci]] = mean_c;
                }
                // similarity of each position to the pooled descriptor
                let mut attn = vec![A::zero(); spatial];
                for ci in 0..cg {
                    let p = pooled[[bi, g, ci]];
                    let row = group.row(ci);
                    for (i, v) in row.iter().enumerate() {
                        attn[i] += *v * p;
                    }
                }
                let mean = attn.iter().copied().sum::<A>() / nf;
                let var = attn
                    .iter()
                    .fold(A::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                    / nf;
                let istd = A::one() / (var + self.eps).sqrt();
                inv_std[[bi, g]] = istd;
                let gamma = self.gamma.value[[g]];
                let beta = self.beta.value[[g]];
                for i in 0..spatial {
                    let norm = (attn[i] - mean) * istd;
                    a_norm[[bi, g, i / w, i % w]] = norm;
                    gate[[bi, g, i / w, i % w]] = sigmoid(gamma * norm + beta);
                }
                for ci in 0..cg {
                    let mut out = y.slice_mut(ndarray::s![bi, g * cg + ci, .., ..]);
                    let gview = gate.slice(ndarray::s![bi, g, .., ..]);
                    ndarray::Zip::from(&mut out).and(&gview).for_each(|o, &s| *o = *o * s);
                }
            }
        }
        if train {
            self.cache = Some(SgeCache {
                x: x4,
                pooled,
                a_norm,
                inv_std,
                gate,
            });
        }
        y.into_dyn()
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let cache = self.cache.take().expect("sge backward without forward");
        let dy = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = cache.x.dim();
        let cg = c / self.groups;
        let spatial = h * w;
        let nf = A::from_usize_c(spatial);
        let mut dx = Array4::<A>::zeros((b, c, h, w));

        for bi in 0..b {
            for g in 0..self.groups {
                let xg: ArrayView2<A> = cache
                    .x
                    .slice(ndarray::s![bi, g * cg..(g + 1) * cg, .., ..])
                    .into_shape_with_order((cg, spatial))
                    .unwrap();
                let dyg: ArrayView2<A> = dy
                    .slice(ndarray::s![bi, g * cg..(g + 1) * cg, .., ..])
                    .into_shape_with_order((cg, spatial))
                    .unwrap();
                let gate = cache.gate.slice(ndarray::s![bi, g, .., ..]);
                let gate_flat: Vec<A> = gate.iter().copied().collect();
                let norm = cache.a_norm.slice(ndarray::s![bi, g, .., ..]);
                let norm_flat: Vec<A> = norm.iter().copied().collect();
                let gamma = self.gamma.value[[g]];

                // gradient into the gate then into the pre-sigmoid affine
                let mut d_attn_hat = vec![A::zero(); spatial];
                for i in 0..spatial {
                    let mut ds = A::zero();
                    for ci in 0..cg {
                        ds += dyg[[ci, i]] * xg[[ci, i]];
                    }
                    let s = gate_flat[i];
                    d_attn_hat[i] = ds * s * (A::one() - s);
                }
                let mut dgamma = A::zero();
                let mut dbeta = A::zero();
                for i in 0..spatial {
                    dgamma += d_attn_hat[i] * norm_flat[i];
                    dbeta += d_attn_hat[i];
                }
                self.gamma.grad[[g]] += dgamma;
                self.beta.grad[[g]] += dbeta;

                // standardization backward
                let istd = cache.inv_std[[bi, g]];
                let mut sum_dn = A::zero();
                let mut sum_dn_n = A::zero();
                for i in 0..spatial {
                    let dn = d_attn_hat[i] * gamma;
                    sum_dn += dn;
                    sum_dn_n += dn * norm_flat[i];
                }
                let mut d_attn = vec![A::zero(); spatial];
                for i in 0..spatial {
                    let dn = d_attn_hat[i] * gamma;
                    d_attn[i] = istd * (dn - sum_dn / nf - norm_flat[i] * sum_dn_n / nf);
                }

                // attention was x . pooled; fan the gradient out to both
                let mut d_pooled = vec![A::zero(); cg];
                for ci in 0..cg {
                    let p = cache.pooled[[bi, g, ci]];
                    let mut acc = A::zero();
                    for i in 0..spatial {
                        acc += d_attn[i] * xg[[ci, i]];
                    }
                    d_pooled[ci] = acc;
                    let mut dxrow = dx
                        .slice_mut(ndarray::s![bi, g * cg + ci, .., ..])
                        .into_shape_with_order(spatial)
                        .unwrap();
                    for i in 0..spatial {
                        // direct gate path + similarity path + pooling path
                        dxrow[i] = dyg[[ci, i]] * gate_flat[i] + d_attn[i] * p + d_pooled[ci] / nf;
                    }
                }
            }
        }
        dx.into_dyn()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

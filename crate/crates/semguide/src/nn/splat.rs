//! Split-attention residual block: parallel radix branches mixed by
//! channel-wise weights normalized across branches.

use ndarray::{Array3, Array4, Ix4};
use rand_chacha::ChaCha8Rng;

use super::act::sigmoid;
use super::conv::Conv2d;
use super::dense::Linear;
use super::norm::InstanceNorm;
use super::pool::global_avg_pool;
use super::{Layer, Param, Relu, Scalar, Tensor};

/// Normalizes attention logits `[b, cardinality, radix, c_per]` across the
/// radix axis: softmax for radix >= 2, elementwise sigmoid for radix = 1.
pub fn rsoftmax<A: Scalar>(logits: &Tensor<A>) -> Tensor<A> {
    let l = logits
        .view()
        .into_dimensionality::<Ix4>()
        .expect("rsoftmax expects [b, k, r, c]");
    let (b, k, r, c) = l.dim();
    let mut out = Array4::<A>::zeros((b, k, r, c));
    if r == 1 {
        out.assign(&l.mapv(sigmoid));
        return out.into_dyn();
    }
    for bi in 0..b {
        for ki in 0..k {
            for ci in 0..c {
                let mut maxv = l[[bi, ki, 0, ci]];
                for ri in 1..r {
                    if l[[bi, ki, ri, ci]] > maxv {
                        maxv = l[[bi, ki, ri, ci]];
                    }
                }
                let mut denom = A::zero();
                for ri in 0..r {
                    denom += (l[[bi, ki, ri, ci]] - maxv).exp();
                }
                for ri in 0..r {
                    out[[bi, ki, ri, ci]] = (l[[bi, ki, ri, ci]] - maxv).exp() / denom;
                }
            }
        }
    }
    out.into_dyn()
}

/// Split-attention bottleneck with residual shortcut.
///
/// `1x1 conv -> norm/relu -> grouped 3x3 producing radix branches ->
/// norm/relu -> branch sum -> global pool -> two-layer bottleneck ->
/// rsoftmax -> weighted branch mix -> 1x1 conv -> norm`, plus shortcut.
pub struct SplitAttention<A: Scalar> {
    conv_in: Conv2d<A>,
    norm_in: InstanceNorm<A>,
    relu_in: Relu<A>,
    conv_splat: Conv2d<A>,
    norm_splat: InstanceNorm<A>,
    relu_splat: Relu<A>,
    fc1: Linear<A>,
    relu_fc: Relu<A>,
    fc2: Linear<A>,
    conv_out: Conv2d<A>,
    norm_out: InstanceNorm<A>,
    shortcut: Option<(Conv2d<A>, InstanceNorm<A>)>,
    relu_final: Relu<A>,
    radix: usize,
    cardinality: usize,
    width: usize,
    cache: Option<MixCache<A>>,
}

struct MixCache<A: Scalar> {
    branches: Array4<A>, // [b, width*radix, h, w] post-activation
    weights: Array3<A>,  // [b, radix, width]
}

impl<A: Scalar> SplitAttention<A> {
    pub fn new(
        in_channels: usize,
        width: usize,
        out_channels: usize,
        stride: usize,
        radix: usize,
        cardinality: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(radix >= 1 && cardinality >= 1);
        assert_eq!(
            width % (radix * cardinality),
            0,
            "width {width} not divisible by radix*cardinality"
        );
        let inter = (width * radix / 4).max(8);
        let needs_projection = stride != 1 || in_channels != out_channels;
        Self {
            conv_in: Conv2d::new(in_channels, width, 1, 1, 0, 1, false, rng),
            norm_in: InstanceNorm::new(width, true),
            relu_in: Relu::new(),
            conv_splat: Conv2d::new(
                width,
                width * radix,
                3,
                stride,
                1,
                cardinality * radix,
                false,
                rng,
            ),
            norm_splat: InstanceNorm::new(width * radix, true),
            relu_splat: Relu::new(),
            fc1: Linear::new(width, inter, rng),
            relu_fc: Relu::new(),
            fc2: Linear::new(inter, width * radix, rng),
            conv_out: Conv2d::new(width, out_channels, 1, 1, 0, 1, false, rng),
            norm_out: InstanceNorm::new(out_channels, true),
            shortcut: needs_projection.then(|| {
                (
                    Conv2d::new(in_channels, out_channels, 1, stride, 0, 1, false, rng),
                    InstanceNorm::new(out_channels, true),
                )
            }),
            relu_final: Relu::new(),
            radix,
            cardinality,
            width,
            cache: None,
        }
    }

    pub fn radix(&self) -> usize {
        self.radix
    }

    /// Mixes radix branches by their attention weights.
    fn mix(&self, branches: &Array4<A>, weights: &Array3<A>) -> Array4<A> {
        let (b, _, h, w) = branches.dim();
        let width = self.width;
        let mut out = Array4::<A>::zeros((b, width, h, w));
        for bi in 0..b {
            for r in 0..self.radix {
                for c in 0..width {
                    let wgt = weights[[bi, r, c]];
                    let src = branches.slice(ndarray::s![bi, r * width + c, .., ..]);
                    let mut dst = out.slice_mut(ndarray::s![bi, c, .., ..]);
                    ndarray::Zip::from(&mut dst).and(&src).for_each(|o, &v| *o += v * wgt);
                }
            }
        }
        out
    }
}

impl<A: Scalar> Layer<A> for SplitAttention<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let t = self.relu_in.forward(
            &self.norm_in.forward(&self.conv_in.forward(x, train), train),
            train,
        );
        let u = self.relu_splat.forward(
            &self
                .norm_splat
                .forward(&self.conv_splat.forward(&t, train), train),
            train,
        );
        let u4 = u.view().into_dimensionality::<Ix4>().unwrap().to_owned();
        let (b, _, h, w) = u4.dim();
        let width = self.width;

        // branch sum then squeeze to a channel descriptor
        let mut summed = Array4::<A>::zeros((b, width, h, w));
        for r in 0..self.radix {
            let br = u4.slice(ndarray::s![.., r * width..(r + 1) * width, .., ..]);
            summed += &br;
        }
        let pooled = global_avg_pool(&summed.into_dyn());
        let z = self.relu_fc.forward(&self.fc1.forward(&pooled, train), train);
        let logits = self.fc2.forward(&z, train);

        // branch-major logits -> [b, cardinality, radix, c_per] for rsoftmax
        let c_per = width / self.cardinality;
        let l4 = logits
            .view()
            .into_shape_with_order((b, self.radix, self.cardinality, c_per))
            .unwrap()
            .permuted_axes([0, 2, 1, 3])
            .to_owned();
        let wts = rsoftmax(&l4.into_dyn());
        let weights = wts
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .permuted_axes([0, 2, 1, 3])
            .to_owned()
            .into_shape_with_order((b, self.radix, width))
            .unwrap();

        let mixed = self.mix(&u4, &weights);
        let o = self
            .norm_out
            .forward(&self.conv_out.forward(&mixed.into_dyn(), train), train);
        let sc = match &mut self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x, train), train),
            None => x.clone(),
        };
        let y = self.relu_final.forward(&(&o + &sc), train);
        if train {
            self.cache = Some(MixCache {
                branches: u4,
                weights,
            });
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let cache = self.cache.take().expect("split attention backward without forward");
        let dsum = self.relu_final.backward(grad_out);
        let dx_shortcut = match &mut self.shortcut {
            Some((conv, norm)) => conv.backward(&norm.backward(&dsum)),
            None => dsum.clone(),
        };
        let dmixed = self.conv_out.backward(&self.norm_out.backward(&dsum));
        let dmixed4 = dmixed.view().into_dimensionality::<Ix4>().unwrap();
        let (b, _, h, w) = dmixed4.dim();
        let width = self.width;
        let spatial = A::from_usize_c(h * w);

        // weighted-mix backward: gradients to branches and to weights
        let mut du = Array4::<A>::zeros((b, width * self.radix, h, w));
        let mut dweights = Array3::<A>::zeros((b, self.radix, width));
        for bi in 0..b {
            for r in 0..self.radix {
                for c in 0..width {
                    let wgt = cache.weights[[bi, r, c]];
                    let dv = dmixed4.slice(ndarray::s![bi, c, .., ..]);
                    let ub = cache.branches.slice(ndarray::s![bi, r * width + c, .., ..]);
                    let mut dub = du.slice_mut(ndarray::s![bi, r * width + c, .., ..]);
                    let mut acc = A::zero();
                    ndarray::Zip::from(&mut dub).and(&dv).and(&ub).for_each(|o, &d, &u| {
                        *o += d * wgt;
                        acc += d * u;
                    });
                    dweights[[bi, r, c]] = acc;
                }
            }
        }

        // rsoftmax backward
        let mut dlogits = ndarray::Array2::<A>::zeros((b, width * self.radix));
        if self.radix == 1 {
            for bi in 0..b {
                for c in 0..width {
                    let s = cache.weights[[bi, 0, c]];
                    dlogits[[bi, c]] = dweights[[bi, 0, c]] * s * (A::one() - s);
                }
            }
        } else {
            for bi in 0..b {
                for c in 0..width {
                    let mut dot = A::zero();
                    for r in 0..self.radix {
                        dot += dweights[[bi, r, c]] * cache.weights[[bi, r, c]];
                    }
                    for r in 0..self.radix {
                        let s = cache.weights[[bi, r, c]];
                        dlogits[[bi, r * width + c]] = s * (dweights[[bi, r, c]] - dot);
                    }
                }
            }
        }

        let dz = self.fc2.backward(&dlogits.into_dyn());
        let dpooled = self.fc1.backward(&self.relu_fc.backward(&dz));
        let dpooled2 = dpooled.view().into_dimensionality::<ndarray::Ix2>().unwrap();

        // pool backward feeds every branch through the branch sum
        for bi in 0..b {
            for c in 0..width {
                let g = dpooled2[[bi, c]] / spatial;
                for r in 0..self.radix {
                    du.slice_mut(ndarray::s![bi, r * width + c, .., ..])
                        .mapv_inplace(|v| v + g);
                }
            }
        }

        let dt = self.conv_splat.backward(
            &self
                .norm_splat
                .backward(&self.relu_splat.backward(&du.into_dyn())),
        );
        let dx_main = self
            .conv_in
            .backward(&self.norm_in.backward(&self.relu_in.backward(&dt)));
        &dx_main + &dx_shortcut
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        self.conv_in.visit_params(&format!("{prefix}.conv_in"), f);
        self.norm_in.visit_params(&format!("{prefix}.norm_in"), f);
        self.conv_splat.visit_params(&format!("{prefix}.conv_splat"), f);
        self.norm_splat.visit_params(&format!("{prefix}.norm_splat"), f);
        self.fc1.visit_params(&format!("{prefix}.fc1"), f);
        self.fc2.visit_params(&format!("{prefix}.fc2"), f);
        self.conv_out.visit_params(&format!("{prefix}.conv_out"), f);
        self.norm_out.visit_params(&format!("{prefix}.norm_out"), f);
        if let Some((conv, norm)) = &mut self.shortcut {
            conv.visit_params(&format!("{prefix}.shortcut_conv"), f);
            norm.visit_params(&format!("{prefix}.shortcut_norm"), f);
        }
    }
}

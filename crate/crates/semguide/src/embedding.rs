//! Semantic feature embedding: a learnable five-layer transposed-convolution
//! stack that upsamples a raw activation map 32x into a D-channel,
//! image-resolution guidance map, plus the non-learnable manual-reshape
//! baseline used for ablation.

use ndarray::{Array4, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvTranspose2d, InstanceNorm, Layer, Param, Relu, Scalar, Tensor};

pub use crate::nn::norm::instance_normalize;

pub const EMBEDDING_LAYERS: usize = 5;

/// Geometry of the deconvolution stack. Every layer doubles the spatial side
/// exactly; five layers give the 32x upsample that undoes the backbone
/// stride.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Channels of the final embedding (1 by default, 3 for the ablation).
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub use_affine_norm: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            out_channels: 1,
            kernel: 4,
            stride: 2,
            padding: 1,
            use_affine_norm: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be at least 1".into()));
        }
        // exact doubling: (h-1)*s + k - 2p == 2h  <=>  s == 2 and k == 2p + 2
        if self.stride != 2 || self.kernel != 2 * self.padding + 2 {
            return Err(Error::Config(format!(
                "deconv geometry (kernel {}, stride {}, padding {}) does not double the side exactly",
                self.kernel, self.stride, self.padding
            )));
        }
        Ok(())
    }
}

/// The learnable embedding stack. Layers 1-4 keep the channel count and are
/// followed by instance norm and a rectifier; layer 5 squeezes channels to D
/// and is followed by instance norm only, which sets the output scale.
pub struct SemanticEmbedder<A: Scalar> {
    layers: Vec<(ConvTranspose2d<A>, InstanceNorm<A>, Option<Relu<A>>)>,
    in_channels: usize,
    out_channels: usize,
}

impl<A: Scalar> SemanticEmbedder<A> {
    pub fn new(in_channels: usize, config: &EmbeddingConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(EMBEDDING_LAYERS);
        for i in 0..EMBEDDING_LAYERS {
            let last = i == EMBEDDING_LAYERS - 1;
            let c_out = if last { config.out_channels } else { in_channels };
            // no bias: instance norm removes per-channel constants anyway
            layers.push((
                ConvTranspose2d::new(
                    in_channels,
                    c_out,
                    config.kernel,
                    config.stride,
                    config.padding,
                    false,
                    rng,
                ),
                InstanceNorm::new(c_out, config.use_affine_norm),
                (!last).then(Relu::new),
            ));
        }
        Ok(Self {
            layers,
            in_channels,
            out_channels: config.out_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Upsamples a `[b, c, h, w]` map to `[b, d, 32h, 32w]`.
    pub fn embed_cam(&mut self, cam: &Tensor<A>, train: bool) -> Result<Tensor<A>> {
        let c = cam
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Shape("embed_cam expects [b, c, h, w]".into()))?
            .shape()[1];
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "embedding stack built for {} channels, got {c}",
                self.in_channels
            )));
        }
        Ok(self.forward(cam, train))
    }
}

impl<A: Scalar> Layer<A> for SemanticEmbedder<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let mut h = x.clone();
        for (deconv, norm, relu) in self.layers.iter_mut() {
            h = norm.forward(&deconv.forward(&h, train), train);
            if let Some(relu) = relu {
                h = relu.forward(&h, train);
            }
        }
        h
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let mut g = grad_out.clone();
        for (deconv, norm, relu) in self.layers.iter_mut().rev() {
            if let Some(relu) = relu {
                g = relu.backward(&g);
            }
            g = deconv.backward(&norm.backward(&g));
        }
        g
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        for (i, (deconv, norm, _)) in self.layers.iter_mut().enumerate() {
            deconv.visit_params(&format!("{prefix}.deconv{i}"), f);
            norm.visit_params(&format!("{prefix}.norm{i}"), f);
        }
    }
}

/// Bilinear interpolation of each class channel to `side x side`
/// (corner-aligned).
fn bilinear_resize<A: Scalar>(plane: &ndarray::ArrayView2<A>, side: usize) -> ndarray::Array2<A> {
    let (h, w) = plane.dim();
    let mut out = ndarray::Array2::<A>::zeros((side, side));
    let sy = if side > 1 {
        (h - 1) as f64 / (side - 1) as f64
    } else {
        0.0
    };
    let sx = if side > 1 {
        (w - 1) as f64 / (side - 1) as f64
    } else {
        0.0
    };
    for y in 0..side {
        let fy = y as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = A::from_f64_c(fy - y0 as f64);
        for x in 0..side {
            let fx = x as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = A::from_f64_c(fx - x0 as f64);
            let top = plane[[y0, x0]] * (A::one() - tx) + plane[[y0, x1]] * tx;
            let bot = plane[[y1, x0]] * (A::one() - tx) + plane[[y1, x1]] * tx;
            out[[y, x]] = top * (A::one() - ty) + bot * ty;
        }
    }
    out
}

/// Non-learnable ablation baseline: bilinear upsample of every class
/// channel, channel-wise summation, then per-sample min-max normalization to
/// `[0, 1]`. A constant map (min = max) normalizes to all zeros.
pub fn manual_reshape_baseline<A: Scalar>(cam: &Tensor<A>, target_side: usize) -> Result<Tensor<A>> {
    let c4 = cam
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::Shape("manual reshape expects [b, c, h, w]".into()))?;
    let (b, c, h, _w) = c4.dim();
    if target_side < h {
        return Err(Error::Shape(format!(
            "target side {target_side} smaller than input side {h}"
        )));
    }
    let mut out = Array4::<A>::zeros((b, 1, target_side, target_side));
    for bi in 0..b {
        let mut summed = ndarray::Array2::<A>::zeros((target_side, target_side));
        for ci in 0..c {
            let plane = c4.index_axis(ndarray::Axis(0), bi);
            let resized = bilinear_resize(&plane.index_axis(ndarray::Axis(0), ci), target_side);
            summed += &resized;
        }
        let mut min = A::infinity();
        let mut max = A::neg_infinity();
        for v in summed.iter() {
            if *v < min {
                min = *v;
            }
            if *v > max {
                max = *v;
            }
        }
        let range = max - min;
        if range > A::zero() {
            summed.mapv_inplace(|v| (v - min) / range);
        } else {
            summed.fill(A::zero());
        }
        out.slice_mut(ndarray::s![bi, 0, .., ..]).assign(&summed);
    }
    Ok(out.into_dyn())
}

/// Channel-axis concatenation with the image channels first.
pub fn concat_with_image<A: Scalar>(image: &Tensor<A>, embedding: &Tensor<A>) -> Result<Tensor<A>> {
    let im = image
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::Shape("concat expects [b, c, s, s] image".into()))?;
    let em = embedding
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::Shape("concat expects [b, d, s, s] embedding".into()))?;
    if im.shape()[0] != em.shape()[0] {
        return Err(Error::Shape("batch size mismatch in concat".into()));
    }
    if im.shape()[2..] != em.shape()[2..] {
        return Err(Error::Shape(format!(
            "spatial mismatch in concat: {:?} vs {:?}",
            &im.shape()[2..],
            &em.shape()[2..]
        )));
    }
    let (b, ci, h, w) = im.dim();
    let cd = em.shape()[1];
    let mut out = Array4::<A>::zeros((b, ci + cd, h, w));
    out.slice_mut(ndarray::s![.., ..ci, .., ..]).assign(&im);
    out.slice_mut(ndarray::s![.., ci.., .., ..]).assign(&em);
    Ok(out.into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn stack_upsamples_32x_for_d1_and_d3() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [1usize, 3] {
            let config = EmbeddingConfig {
                out_channels: d,
                ..Default::default()
            };
            let mut stack = SemanticEmbedder::<f32>::new(11, &config, &mut rng).unwrap();
            let cam = Tensor::<f32>::zeros(IxDyn(&[2, 11, 8, 8]));
            let out = stack.embed_cam(&cam, false).unwrap();
            assert_eq!(out.shape(), &[2, d, 256, 256]);
        }
    }

    #[test]
    fn smaller_grid_still_multiplies_by_32() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut stack = SemanticEmbedder::<f32>::new(11, &EmbeddingConfig::default(), &mut rng).unwrap();
        let cam = Tensor::<f32>::zeros(IxDyn(&[2, 11, 4, 4]));
        let out = stack.embed_cam(&cam, false).unwrap();
        assert_eq!(out.shape(), &[2, 1, 128, 128]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut stack = SemanticEmbedder::<f32>::new(11, &EmbeddingConfig::default(), &mut rng).unwrap();
        let cam = Tensor::<f32>::zeros(IxDyn(&[1, 7, 8, 8]));
        assert!(stack.embed_cam(&cam, false).is_err());
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        let config = EmbeddingConfig {
            kernel: 3,
            ..Default::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn constant_cam_reshapes_to_zeros() {
        let cam = Tensor::<f64>::from_elem(IxDyn(&[1, 3, 4, 4]), 2.5);
        let out = manual_reshape_baseline(&cam, 16).unwrap();
        assert_eq!(out.shape(), &[1, 1, 16, 16]);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hot_pixel_peak_is_preserved_within_one_pixel() {
        // hand-checkable 2x2 -> 4x4 corner-aligned bilinear: the hot corner
        // stays the maximum of the upsampled map
        let mut cam = Tensor::<f64>::zeros(IxDyn(&[1, 1, 2, 2]));
        cam[[0, 0, 0, 1]] = 1.0;
        let out = manual_reshape_baseline(&cam, 4).unwrap();
        let mut argmax = (0, 0);
        let mut best = f64::NEG_INFINITY;
        for y in 0..4 {
            for x in 0..4 {
                if out[[0, 0, y, x]] > best {
                    best = out[[0, 0, y, x]];
                    argmax = (y, x);
                }
            }
        }
        assert_eq!(argmax, (0, 3));
        assert!((best - 1.0).abs() < 1e-12);
        // hand computation: column positions map to source x = {0, 1/3, 2/3, 1}
        assert!((out[[0, 0, 0, 1]] - 1.0 / 3.0).abs() < 1e-12);
        assert!((out[[0, 0, 0, 2]] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn reshape_output_is_in_unit_range_and_scale_invariant() {
        let cam = Tensor::<f64>::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |ix| {
            ((ix[0] + ix[1] * 5 + ix[2] * 2 + ix[3] * 7) as f64 * 0.37).sin() + 0.2
        });
        let a = manual_reshape_baseline(&cam, 12).unwrap();
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let b = manual_reshape_baseline(&(&cam * 3.0), 12).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9, "min-max must remove positive scale");
        }
    }

    #[test]
    fn concat_keeps_image_channels_first() {
        let image = Tensor::<f32>::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |ix| {
            (ix[0] + ix[1] * 100 + ix[2] + ix[3]) as f32
        });
        let emb = Tensor::<f32>::from_elem(IxDyn(&[2, 1, 8, 8]), -5.0);
        let out = concat_with_image(&image, &emb).unwrap();
        assert_eq!(out.shape(), &[2, 4, 8, 8]);
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        assert_eq!(out[[b, c, y, x]], image[[b, c, y, x]]);
                    }
                }
            }
        }
        let emb3 = Tensor::<f32>::zeros(IxDyn(&[2, 3, 8, 8]));
        assert_eq!(concat_with_image(&image, &emb3).unwrap().shape(), &[2, 6, 8, 8]);
        let bad = Tensor::<f32>::zeros(IxDyn(&[2, 1, 4, 4]));
        assert!(concat_with_image(&image, &bad).is_err());
    }

    #[test]
    fn five_layer_stack_gradients_match_finite_differences() {
        // tiny channel count for speed
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let config = EmbeddingConfig::default();
        let mut stack = SemanticEmbedder::<f64>::new(3, &config, &mut rng).unwrap();
        let cam = Tensor::<f64>::from_shape_fn(IxDyn(&[1, 3, 2, 2]), |ix| {
            ((ix[1] * 4 + ix[2] * 2 + ix[3]) as f64 * 0.57).sin()
        });
        let report = crate::nn::check::check_layer_gradients(&mut stack, &cam, 1e-5);
        assert!(report.worst() < 1e-4, "{report:?}");
    }
}

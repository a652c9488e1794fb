//! Channel-wise-attention multi-label classifier over the concatenated
//! (image + semantic embedding) tensor, plus the plain-convolution ablation
//! variant with matched depth and widths.

use ndarray::Ix4;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::act::sigmoid;
use crate::nn::{
    Conv2d, GlobalAvgPool, InstanceNorm, Layer, Linear, Param, Relu, Scalar, SplitAttention,
    Tensor,
};

pub use crate::nn::splat::rsoftmax;

/// Architecture of the attention classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAttentionConfig {
    pub radix: usize,
    pub cardinality: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub fc_hidden: Vec<usize>,
}

impl Default for SplitAttentionConfig {
    fn default() -> Self {
        Self {
            radix: 2,
            cardinality: 1,
            stage_widths: vec![32, 64, 128, 256],
            blocks_per_stage: vec![2, 2, 2, 2],
            fc_hidden: vec![512, 256],
        }
    }
}

impl SplitAttentionConfig {
    /// CI-sized preset: halved widths and FC sizes.
    pub fn fast() -> Self {
        Self {
            radix: 2,
            cardinality: 1,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: vec![2, 2, 2, 2],
            fc_hidden: vec![256, 128],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radix < 1 || self.cardinality < 1 {
            return Err(Error::Config("radix and cardinality must be at least 1".into()));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(
                "stage_widths and blocks_per_stage must be nonempty and equal length".into(),
            ));
        }
        for w in &self.stage_widths {
            if *w == 0 || w % (self.radix * self.cardinality) != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} must divide by radix*cardinality {}",
                    self.radix * self.cardinality
                )));
            }
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        1 << (1 + self.stage_widths.len())
    }
}

/// Plain residual bottleneck with the same layout as the split-attention
/// block but a single 3x3 convolution in the middle.
pub struct PlainBlock<A: Scalar> {
    conv_in: Conv2d<A>,
    norm_in: InstanceNorm<A>,
    relu_in: Relu<A>,
    conv_mid: Conv2d<A>,
    norm_mid: InstanceNorm<A>,
    relu_mid: Relu<A>,
    conv_out: Conv2d<A>,
    norm_out: InstanceNorm<A>,
    shortcut: Option<(Conv2d<A>, InstanceNorm<A>)>,
    relu_final: Relu<A>,
}

impl<A: Scalar> PlainBlock<A> {
    pub fn new(
        in_channels: usize,
        width: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let needs_projection = stride != 1 || in_channels != out_channels;
        Self {
            conv_in: Conv2d::new(in_channels, width, 1, 1, 0, 1, false, rng),
            norm_in: InstanceNorm::new(width, true),
            relu_in: Relu::new(),
            conv_mid: Conv2d::new(width, width, 3, stride, 1, 1, false, rng),
            norm_mid: InstanceNorm::new(width, true),
            relu_mid: Relu::new(),
            conv_out: Conv2d::new(width, out_channels, 1, 1, 0, 1, false, rng),
            norm_out: InstanceNorm::new(out_channels, true),
            shortcut: needs_projection.then(|| {
                (
                    Conv2d::new(in_channels, out_channels, 1, stride, 0, 1, false, rng),
                    InstanceNorm::new(out_channels, true),
                )
            }),
            relu_final: Relu::new(),
        }
    }
}

impl<A: Scalar> Layer<A> for PlainBlock<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let mut h = self.relu_in.forward(
            &self.norm_in.forward(&self.conv_in.forward(x, train), train),
            train,
        );
        h = self.relu_mid.forward(
            &self.norm_mid.forward(&self.conv_mid.forward(&h, train), train),
            train,
        );
        let o = self
            .norm_out
            .forward(&self.conv_out.forward(&h, train), train);
        let sc = match &mut self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x, train), train),
            None => x.clone(),
        };
        self.relu_final.forward(&(&o + &sc), train)
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let dsum = self.relu_final.backward(grad_out);
        let dx_shortcut = match &mut self.shortcut {
            Some((conv, norm)) => conv.backward(&norm.backward(&dsum)),
            None => dsum.clone(),
        };
        let mut dh = self.conv_out.backward(&self.norm_out.backward(&dsum));
        dh = self
            .conv_mid
            .backward(&self.norm_mid.backward(&self.relu_mid.backward(&dh)));
        let dx_main = self
            .conv_in
            .backward(&self.norm_in.backward(&self.relu_in.backward(&dh)));
        &dx_main + &dx_shortcut
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        self.conv_in.visit_params(&format!("{prefix}.conv_in"), f);
        self.norm_in.visit_params(&format!("{prefix}.norm_in"), f);
        self.conv_mid.visit_params(&format!("{prefix}.conv_mid"), f);
        self.norm_mid.visit_params(&format!("{prefix}.norm_mid"), f);
        self.conv_out.visit_params(&format!("{prefix}.conv_out"), f);
        self.norm_out.visit_params(&format!("{prefix}.norm_out"), f);
        if let Some((conv, norm)) = &mut self.shortcut {
            conv.visit_params(&format!("{prefix}.shortcut_conv"), f);
            norm.visit_params(&format!("{prefix}.shortcut_norm"), f);
        }
    }
}

/// Full classifier: stem for `3 + d` channels, residual stages (attention or
/// plain), global average pool, FC stack, `c` output logits.
pub struct ClassifierModel<A: Scalar> {
    stem_conv: Conv2d<A>,
    stem_norm: InstanceNorm<A>,
    stem_relu: Relu<A>,
    blocks: Vec<Box<dyn Layer<A>>>,
    pool: GlobalAvgPool,
    fc: Vec<(Linear<A>, Option<Relu<A>>)>,
    in_channels: usize,
    n_classes: usize,
    attention_blocks: usize,
}

impl<A: Scalar> ClassifierModel<A> {
    fn build(
        config: &SplitAttentionConfig,
        in_channels: usize,
        n_classes: usize,
        attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let w0 = config.stage_widths[0];
        let stem_conv = Conv2d::new(in_channels, w0, 3, 2, 1, 1, false, rng);
        let stem_norm = InstanceNorm::new(w0, true);
        let mut blocks: Vec<Box<dyn Layer<A>>> = Vec::new();
        let mut attention_blocks = 0;
        let mut in_ch = w0;
        for (&width, &n_blocks) in config.stage_widths.iter().zip(&config.blocks_per_stage) {
            for b in 0..n_blocks {
                let stride = if b == 0 { 2 } else { 1 };
                if attention {
                    blocks.push(Box::new(SplitAttention::new(
                        in_ch,
                        width,
                        width,
                        stride,
                        config.radix,
                        config.cardinality,
                        rng,
                    )));
                    attention_blocks += 1;
                } else {
                    blocks.push(Box::new(PlainBlock::new(in_ch, width, width, stride, rng)));
                }
                in_ch = width;
            }
        }
        let mut fc = Vec::new();
        let mut features = in_ch;
        for &hidden in &config.fc_hidden {
            fc.push((Linear::new(features, hidden, rng), Some(Relu::new())));
            features = hidden;
        }
        fc.push((Linear::new(features, n_classes, rng), None));
        Ok(Self {
            stem_conv,
            stem_norm,
            stem_relu: Relu::new(),
            blocks,
            pool: GlobalAvgPool::new(),
            fc,
            in_channels,
            n_classes,
            attention_blocks,
        })
    }

    /// Split-attention variant.
    pub fn new_attention(
        config: &SplitAttentionConfig,
        in_channels: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(config, in_channels, n_classes, true, rng)
    }

    /// Plain-convolution ablation: identical depth, widths, and FC head, no
    /// radix branches and no rsoftmax anywhere.
    pub fn new_plain(
        config: &SplitAttentionConfig,
        in_channels: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::build(config, in_channels, n_classes, false, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Number of rsoftmax-bearing blocks (zero for the plain variant).
    pub fn attention_block_count(&self) -> usize {
        self.attention_blocks
    }

    /// Checked forward pass to `[b, c]` logits, no output activation.
    pub fn forward_logits(&mut self, x: &Tensor<A>, train: bool) -> Result<Tensor<A>> {
        let x4 = x
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Shape("classifier expects [b, c, s, s]".into()))?;
        if x4.shape()[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "classifier stem built for {} channels, got {}",
                self.in_channels,
                x4.shape()[1]
            )));
        }
        Ok(self.forward(x, train))
    }
}

impl<A: Scalar> Layer<A> for ClassifierModel<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let mut h = self.stem_relu.forward(
            &self
                .stem_norm
                .forward(&self.stem_conv.forward(x, train), train),
            train,
        );
        for block in self.blocks.iter_mut() {
            h = block.forward(&h, train);
        }
        h = Layer::<A>::forward(&mut self.pool, &h, train);
        for (linear, relu) in self.fc.iter_mut() {
            h = linear.forward(&h, train);
            if let Some(relu) = relu {
                h = relu.forward(&h, train);
            }
        }
        h
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let mut g = grad_out.clone();
        for (linear, relu) in self.fc.iter_mut().rev() {
            if let Some(relu) = relu {
                g = relu.backward(&g);
            }
            g = linear.backward(&g);
        }
        g = Layer::<A>::backward(&mut self.pool, &g);
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g);
        }
        self.stem_conv.backward(
            &self
                .stem_norm
                .backward(&self.stem_relu.backward(&g)),
        )
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        self.stem_conv.visit_params(&format!("{prefix}.stem_conv"), f);
        self.stem_norm.visit_params(&format!("{prefix}.stem_norm"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&format!("{prefix}.block{i}"), f);
        }
        for (i, (linear, _)) in self.fc.iter_mut().enumerate() {
            linear.visit_params(&format!("{prefix}.fc{i}"), f);
        }
    }
}

/// Checked forward through a model (channel count must match the stem).
pub fn classifier_forward<A: Scalar>(
    x: &Tensor<A>,
    model: &mut ClassifierModel<A>,
) -> Result<Tensor<A>> {
    model.forward_logits(x, false)
}

/// Independent per-label probabilities: elementwise sigmoid over logits.
pub fn predict_probabilities<A: Scalar>(logits: &Tensor<A>) -> Tensor<A> {
    logits.mapv(sigmoid)
}

/// Builds the plain-convolution variant from the same config.
pub fn build_plain_variant<A: Scalar>(
    config: &SplitAttentionConfig,
    in_channels: usize,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClassifierModel<A>> {
    ClassifierModel::new_plain(config, in_channels, n_classes, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parameter_count;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn tiny_config() -> SplitAttentionConfig {
        SplitAttentionConfig {
            radix: 2,
            cardinality: 1,
            stage_widths: vec![8, 16, 16, 16],
            blocks_per_stage: vec![1, 1, 1, 1],
            fc_hidden: vec![32, 16],
        }
    }

    #[test]
    fn forward_shapes_for_d1_and_d3_stems() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (channels, _d) in [(4usize, 1usize), (6, 3)] {
            let mut model =
                ClassifierModel::<f32>::new_attention(&tiny_config(), channels, 11, &mut rng)
                    .unwrap();
            let x = Tensor::<f32>::zeros(IxDyn(&[2, channels, 64, 64]));
            let y = model.forward_logits(&x, false).unwrap();
            assert_eq!(y.shape(), &[2, 11]);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model =
            ClassifierModel::<f32>::new_attention(&tiny_config(), 4, 11, &mut rng).unwrap();
        let x = Tensor::<f32>::zeros(IxDyn(&[2, 3, 64, 64]));
        assert!(model.forward_logits(&x, false).is_err());
    }

    #[test]
    fn plain_variant_matches_shapes_and_has_no_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut plain = build_plain_variant::<f32>(&tiny_config(), 4, 11, &mut rng).unwrap();
        assert_eq!(plain.attention_block_count(), 0);
        let x = Tensor::<f32>::zeros(IxDyn(&[2, 4, 64, 64]));
        let y = plain.forward_logits(&x, false).unwrap();
        assert_eq!(y.shape(), &[2, 11]);
    }

    #[test]
    fn parameter_counts_within_fifteen_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let config = SplitAttentionConfig::fast();
        let mut attention =
            ClassifierModel::<f32>::new_attention(&config, 4, 11, &mut rng).unwrap();
        let mut plain = ClassifierModel::<f32>::new_plain(&config, 4, 11, &mut rng).unwrap();
        let a = parameter_count::<f32>(&mut attention) as f64;
        let p = parameter_count::<f32>(&mut plain) as f64;
        let ratio = p / a;
        assert!(
            (0.85..=1.15).contains(&ratio),
            "plain/attention parameter ratio {ratio:.4} ({p} vs {a})"
        );
    }

    #[test]
    fn probabilities_are_sigmoid_and_monotone() {
        let logits = Tensor::<f64>::from_shape_vec(
            IxDyn(&[1, 5]),
            vec![0.0, -1.0, 1.0, -700.0, 700.0],
        )
        .unwrap();
        let p = predict_probabilities(&logits);
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12);
        assert!(p[[0, 1]] < p[[0, 0]] && p[[0, 0]] < p[[0, 2]]);
        assert!(p[[0, 3]] >= 0.0 && p[[0, 3]] < 1e-12);
        assert!(p[[0, 4]] <= 1.0 && p[[0, 4]] > 1.0 - 1e-12);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn one_block_toy_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut block = SplitAttention::<f64>::new(8, 8, 8, 1, 2, 1, &mut rng);
        let x = Tensor::<f64>::from_shape_fn(IxDyn(&[2, 8, 3, 3]), |ix| {
            ((ix[0] * 72 + ix[1] * 9 + ix[2] * 3 + ix[3]) as f64 * 0.311).sin() * 0.8
        });
        let report = crate::nn::check::check_layer_gradients(&mut block, &x, 1e-5);
        assert!(report.worst() < 1e-4, "{report:?}");
    }
}

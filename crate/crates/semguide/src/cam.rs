//! Class-activation-map generator: a residual backbone with spatial
//! group-wise enhancement, topped by a per-class 1x1 convolution whose
//! pre-pooling output is the activation map itself.
//!
//! The model trains as an ordinary multi-label classifier (global average
//! pool of the map gives the logits) and is then frozen; downstream stages
//! treat its maps as input data.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array3, Array4, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, ArchiveWriter, Record};
use crate::dataset::{DatasetManifest, ImageStore, Split};
use crate::error::{Error, Result};
use crate::nn::pool::global_avg_pool;
use crate::nn::{Conv2d, InstanceNorm, Layer, Param, Relu, Scalar, Sge, Tensor};
use crate::training::{fit, Batch, FitOutcome, LogitModel, TrainConfig};

pub use crate::nn::sge::{sge_enhance, SgeParams};

/// Residual backbone geometry. The stem and every stage halve the spatial
/// side, so the total stride is `2^(1 + n_stages)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Channel groups of the SGE gate inside each residual unit.
    pub sge_groups: usize,
    /// Disables the SGE gates (plain residual backbone).
    pub use_sge: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![32, 64, 128, 256],
            blocks_per_stage: vec![2, 2, 2, 2],
            sge_groups: 8,
            use_sge: true,
        }
    }
}

impl BackboneConfig {
    /// CI-sized preset: halved widths.
    pub fn fast() -> Self {
        Self {
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: vec![2, 2, 2, 2],
            sge_groups: 8,
            use_sge: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(
                "stage_widths and blocks_per_stage must be nonempty and equal length".into(),
            ));
        }
        for w in &self.stage_widths {
            if *w == 0 || w % self.sge_groups != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} must be a positive multiple of sge_groups {}",
                    self.sge_groups
                )));
            }
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        1 << (1 + self.stage_widths.len())
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_widths.last().expect("validated nonempty")
    }
}

/// Residual unit: two 3x3 convolutions with instance norm, an SGE gate after
/// the second convolution, and a projection shortcut when shapes change.
pub struct ResidualUnit<A: Scalar> {
    conv1: Conv2d<A>,
    norm1: InstanceNorm<A>,
    relu1: Relu<A>,
    conv2: Conv2d<A>,
    norm2: InstanceNorm<A>,
    sge: Option<Sge<A>>,
    shortcut: Option<(Conv2d<A>, InstanceNorm<A>)>,
    relu_out: Relu<A>,
}

impl<A: Scalar> ResidualUnit<A> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        sge_groups: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let needs_projection = stride != 1 || in_channels != out_channels;
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, 1, false, rng),
            norm1: InstanceNorm::new(out_channels, true),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, 1, false, rng),
            norm2: InstanceNorm::new(out_channels, true),
            sge: sge_groups.map(Sge::new),
            shortcut: needs_projection.then(|| {
                (
                    Conv2d::new(in_channels, out_channels, 1, stride, 0, 1, false, rng),
                    InstanceNorm::new(out_channels, true),
                )
            }),
            relu_out: Relu::new(),
        }
    }
}

impl<A: Scalar> Layer<A> for ResidualUnit<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let mut h = self.relu1.forward(
            &self.norm1.forward(&self.conv1.forward(x, train), train),
            train,
        );
        h = self.norm2.forward(&self.conv2.forward(&h, train), train);
        if let Some(sge) = &mut self.sge {
            h = sge.forward(&h, train);
        }
        let sc = match &mut self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x, train), train),
            None => x.clone(),
        };
        self.relu_out.forward(&(&h + &sc), train)
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let dsum = self.relu_out.backward(grad_out);
        let dx_shortcut = match &mut self.shortcut {
            Some((conv, norm)) => conv.backward(&norm.backward(&dsum)),
            None => dsum.clone(),
        };
        let mut dh = dsum;
        if let Some(sge) = &mut self.sge {
            dh = sge.backward(&dh);
        }
        dh = self.conv2.backward(&self.norm2.backward(&dh));
        let dx_main = self
            .conv1
            .backward(&self.norm1.backward(&self.relu1.backward(&dh)));
        &dx_main + &dx_shortcut
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.norm1.visit_params(&format!("{prefix}.norm1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.norm2.visit_params(&format!("{prefix}.norm2"), f);
        if let Some(sge) = &mut self.sge {
            sge.visit_params(&format!("{prefix}.sge"), f);
        }
        if let Some((conv, norm)) = &mut self.shortcut {
            conv.visit_params(&format!("{prefix}.shortcut_conv"), f);
            norm.visit_params(&format!("{prefix}.shortcut_norm"), f);
        }
    }
}

/// The CAM model: stem, residual stages, per-class 1x1 head.
pub struct CamModel<A: Scalar> {
    stem_conv: Conv2d<A>,
    stem_norm: InstanceNorm<A>,
    stem_relu: Relu<A>,
    blocks: Vec<ResidualUnit<A>>,
    head: Conv2d<A>,
    config: BackboneConfig,
    n_classes: usize,
    cache_cam_shape: Option<Vec<usize>>,
}

impl<A: Scalar> CamModel<A> {
    pub fn new(config: &BackboneConfig, n_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let w0 = config.stage_widths[0];
        let stem_conv = Conv2d::new(3, w0, 3, 2, 1, 1, false, rng);
        let stem_norm = InstanceNorm::new(w0, true);
        let mut blocks = Vec::new();
        let mut in_ch = w0;
        let sge = config.use_sge.then_some(config.sge_groups);
        for (&width, &n_blocks) in config.stage_widths.iter().zip(&config.blocks_per_stage) {
            for b in 0..n_blocks {
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(ResidualUnit::new(in_ch, width, stride, sge, rng));
                in_ch = width;
            }
        }
        let head = Conv2d::new(config.feature_channels(), n_classes, 1, 1, 0, 1, true, rng);
        Ok(Self {
            stem_conv,
            stem_norm,
            stem_relu: Relu::new(),
            blocks,
            head,
            config: config.clone(),
            n_classes,
            cache_cam_shape: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Backbone features `[b, f, s/stride, s/stride]`.
    pub fn backbone_forward(&mut self, images: &Tensor<A>, train: bool) -> Result<Tensor<A>> {
        let x4 = images
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Shape("backbone expects [b, 3, s, s]".into()))?;
        let side = x4.shape()[2];
        let stride = self.config.total_stride();
        if x4.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "backbone expects 3 input channels, got {}",
                x4.shape()[1]
            )));
        }
        if side % stride != 0 || x4.shape()[3] != side {
            return Err(Error::Shape(format!(
                "input side {side} not divisible by total stride {stride}"
            )));
        }
        let mut h = self.stem_relu.forward(
            &self
                .stem_norm
                .forward(&self.stem_conv.forward(images, train), train),
            train,
        );
        for block in &mut self.blocks {
            h = block.forward(&h, train);
        }
        Ok(h)
    }

    /// Per-class activation map `[b, c, h', w']`: a 1x1 convolution over the
    /// features, no activation.
    pub fn cam_head_forward(&mut self, features: &Tensor<A>, train: bool) -> Tensor<A> {
        self.head.forward(features, train)
    }

    /// Full pass: images to activation maps.
    pub fn forward_cam(&mut self, images: &Tensor<A>, train: bool) -> Result<Tensor<A>> {
        let features = self.backbone_forward(images, train)?;
        Ok(self.cam_head_forward(&features, train))
    }

    pub fn backward_cam(&mut self, grad_cam: &Tensor<A>) -> Tensor<A> {
        let mut g = self.head.backward(grad_cam);
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g);
        }
        self.stem_conv.backward(
            &self
                .stem_norm
                .backward(&self.stem_relu.backward(&g)),
        )
    }

    pub fn visit_all_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        self.stem_conv.visit_params(&format!("{prefix}.stem_conv"), f);
        self.stem_norm.visit_params(&format!("{prefix}.stem_norm"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&format!("{prefix}.block{i}"), f);
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
}

/// Mean over spatial positions of each class map: `[b, c, h, w] -> [b, c]`.
pub fn logits_from_cam<A: Scalar>(cam: &Tensor<A>) -> Tensor<A> {
    global_avg_pool(cam)
}

impl LogitModel for CamModel<f32> {
    fn forward_logits(&mut self, batch: &Batch, train: bool) -> Tensor<f32> {
        let cam = self
            .forward_cam(&batch.images.clone().into_dyn(), train)
            .expect("batch images validated upstream");
        if train {
            self.cache_cam_shape = Some(cam.shape().to_vec());
        }
        logits_from_cam(&cam)
    }

    fn backward_from_logits(&mut self, grad_logits: &Tensor<f32>) {
        let shape = self
            .cache_cam_shape
            .take()
            .expect("backward without forward");
        let (h, w) = (shape[2], shape[3]);
        let scale = 1.0 / (h * w) as f32;
        let g2 = grad_logits
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut grad_cam = Array4::<f32>::zeros((shape[0], shape[1], h, w));
        for b in 0..shape[0] {
            for c in 0..shape[1] {
                grad_cam
                    .slice_mut(ndarray::s![b, c, .., ..])
                    .fill(g2[[b, c]] * scale);
            }
        }
        self.backward_cam(&grad_cam.into_dyn());
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        self.visit_all_params("cam", f);
    }
}

/// Trains the CAM model on the train split (validation on the test split
/// drives the plateau schedule and best-checkpoint selection).
pub fn train_cam_model(
    manifest: &DatasetManifest,
    dataset_root: impl AsRef<Path>,
    backbone: &BackboneConfig,
    train_config: &TrainConfig,
) -> Result<(CamModel<f32>, FitOutcome)> {
    let train_ids = manifest.ids_for(Split::Train);
    let val_ids = manifest.ids_for(Split::Test);
    if train_ids.is_empty() {
        return Err(Error::Config("empty train split".into()));
    }
    let store = ImageStore::preload(
        manifest,
        &dataset_root,
        &train_ids
            .iter()
            .chain(&val_ids)
            .cloned()
            .collect::<Vec<_>>(),
    )?;
    let mut rng = crate::dataset::sample_rng(train_config.seed, 0xCA11);
    let mut model = CamModel::<f32>::new(backbone, manifest.vocabulary.len(), &mut rng)?;
    let fetch = |ids: &[String]| -> Result<Batch> {
        let (images, targets) = store.batch(ids)?;
        Ok(Batch {
            images,
            cams: None,
            targets,
        })
    };
    let outcome = fit(&mut model, &train_ids, &val_ids, &fetch, train_config)?;
    crate::training::load_params(&mut model, &outcome.best_params)?;
    Ok((model, outcome))
}

/// Runs the frozen model over every manifest record and writes one
/// `[c, h', w']` tensor per sample id into a tensor archive.
pub fn export_cams(
    model: &mut CamModel<f32>,
    manifest: &DatasetManifest,
    dataset_root: impl AsRef<Path>,
    out_path: impl AsRef<Path>,
) -> Result<usize> {
    let ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let store = ImageStore::preload(manifest, &dataset_root, &ids)?;
    let mut writer = ArchiveWriter::create(&out_path)?;
    let mut count = 0usize;
    for chunk in ids.chunks(32) {
        let (images, _) = store.batch(chunk)?;
        let cams = model.forward_cam(&images.into_dyn(), false)?;
        let cams4 = cams.view().into_dimensionality::<Ix4>().unwrap();
        for (i, id) in chunk.iter().enumerate() {
            let one: Array3<f32> = cams4.index_axis(ndarray::Axis(0), i).to_owned();
            writer.put_f32(id, &one.into_dyn())?;
            count += 1;
        }
    }
    writer.finish()?;
    Ok(count)
}

/// Loads an exported CAM archive into an id-keyed map.
pub fn load_cam_archive(path: impl AsRef<Path>) -> Result<HashMap<String, Array3<f32>>> {
    let archive = Archive::open(&path)?;
    let mut out = HashMap::new();
    for (key, record) in archive.iter() {
        if let Record::F32(arr) = record {
            let a3 = arr
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|_| Error::Format(format!("cam record {key} is not rank 3")))?
                .to_owned();
            out.insert(key.to_string(), a3);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            stage_widths: vec![8, 16, 16, 16],
            blocks_per_stage: vec![1, 1, 1, 1],
            sge_groups: 4,
            use_sge: true,
        }
    }

    #[test]
    fn backbone_produces_stride_32_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = CamModel::<f32>::new(&tiny_config(), 11, &mut rng).unwrap();
        let x = Tensor::<f32>::zeros(IxDyn(&[2, 3, 64, 64]));
        let f = model.backbone_forward(&x, false).unwrap();
        assert_eq!(f.shape(), &[2, 16, 2, 2]);
        let cam = model.cam_head_forward(&f, false);
        assert_eq!(cam.shape(), &[2, 11, 2, 2]);
    }

    #[test]
    fn indivisible_input_side_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = CamModel::<f32>::new(&tiny_config(), 11, &mut rng).unwrap();
        let x = Tensor::<f32>::zeros(IxDyn(&[1, 3, 100, 100]));
        assert!(model.backbone_forward(&x, false).is_err());
    }

    #[test]
    fn zero_head_gives_zero_cam() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = CamModel::<f32>::new(&tiny_config(), 4, &mut rng).unwrap();
        model.head.weight.value.fill(0.0);
        if let Some(b) = &mut model.head.bias {
            b.value.fill(0.0);
        }
        let x = Tensor::<f32>::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |ix| {
            (ix[2] as f32 * 0.1).sin()
        });
        let cam = model.forward_cam(&x, false).unwrap();
        assert!(cam.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cam_head_is_per_pixel_channel_mix() {
        // hand-computed 1x1 conv: f=2 features, c=2 classes
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = Conv2d::<f64>::new(2, 2, 1, 1, 0, 1, true, &mut rng);
        head.weight.value = Tensor::from_shape_vec(
            IxDyn(&[2, 2, 1, 1]),
            vec![1.0, 2.0, -1.0, 0.5],
        )
        .unwrap();
        if let Some(b) = &mut head.bias {
            b.value = Tensor::from_shape_vec(IxDyn(&[2]), vec![0.25, -0.25]).unwrap();
        }
        let x = Tensor::<f64>::from_shape_vec(
            IxDyn(&[1, 2, 2, 2]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let y = head.forward(&x, false);
        // class 0 = 1*f0 + 2*f1 + 0.25, class 1 = -1*f0 + 0.5*f1 - 0.25
        let expect0 = [
            1.0 + 2.0 * 5.0 + 0.25,
            2.0 + 2.0 * 6.0 + 0.25,
            3.0 + 2.0 * 7.0 + 0.25,
            4.0 + 2.0 * 8.0 + 0.25,
        ];
        let expect1 = [
            -1.0 + 0.5 * 5.0 - 0.25,
            -2.0 + 0.5 * 6.0 - 0.25,
            -3.0 + 0.5 * 7.0 - 0.25,
            -4.0 + 0.5 * 8.0 - 0.25,
        ];
        for i in 0..4 {
            assert!((y[[0, 0, i / 2, i % 2]] - expect0[i]).abs() < 1e-12);
            assert!((y[[0, 1, i / 2, i % 2]] - expect1[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_from_cam_pools_constants_exactly() {
        let mut cam = Tensor::<f64>::zeros(IxDyn(&[1, 3, 4, 4]));
        for c in 0..3 {
            cam.slice_mut(ndarray::s![0, c, .., ..]).fill(c as f64 * 1.5);
        }
        let logits = logits_from_cam(&cam);
        assert_eq!(logits.shape(), &[1, 3]);
        for c in 0..3 {
            assert!((logits[[0, c]] - c as f64 * 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_from_cam_is_linear() {
        let a = Tensor::<f64>::from_shape_fn(IxDyn(&[2, 3, 2, 2]), |ix| {
            (ix[0] + ix[1] * 2 + ix[2] * 4 + ix[3]) as f64 * 0.31
        });
        let b = Tensor::<f64>::from_shape_fn(IxDyn(&[2, 3, 2, 2]), |ix| {
            ((ix[0] * 3 + ix[1] + ix[2] + ix[3] * 5) as f64).cos()
        });
        let lhs = logits_from_cam(&(&(&a * 2.5) + &b));
        let rhs = &(&logits_from_cam(&a) * 2.5) + &logits_from_cam(&b);
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_head_equals_pool_then_linear() {
        // 1x1 conv then pool must equal pool then the same linear map
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = Conv2d::<f64>::new(6, 4, 1, 1, 0, 1, true, &mut rng);
        let x = Tensor::<f64>::from_shape_fn(IxDyn(&[2, 6, 3, 3]), |ix| {
            ((ix[0] + ix[1] * 7 + ix[2] * 3 + ix[3]) as f64 * 0.173).sin()
        });
        let route_a = logits_from_cam(&head.forward(&x, false));
        let pooled = global_avg_pool(&x);
        let w = head
            .weight
            .value
            .view()
            .into_shape_with_order((4, 6))
            .unwrap()
            .to_owned();
        let p2 = pooled.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut route_b = p2.dot(&w.t());
        let bias = head.bias.as_ref().unwrap().value.clone();
        for b in 0..2 {
            for c in 0..4 {
                route_b[[b, c]] += bias[[c]];
            }
        }
        for (a, b) in route_a.iter().zip(route_b.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

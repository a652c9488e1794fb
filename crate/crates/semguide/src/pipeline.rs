//! Two-stage experiment wiring: frozen CAM generator feeding the
//! embedding+classifier stage, per-variant graph construction, evaluation,
//! and the ablation runner.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Ix2};
use serde::{Deserialize, Serialize};

use crate::cam::{BackboneConfig, CamModel};
use crate::classifier::{predict_probabilities, ClassifierModel};
use crate::config::{ExperimentConfig, Variant};
use crate::dataset::{DatasetManifest, ImageStore, Split};
use crate::embedding::{concat_with_image, manual_reshape_baseline, SemanticEmbedder};
use crate::error::{Error, Result};
use crate::eval::{per_label_report, LabelAucReport};
use crate::nn::{Layer, Param, Tensor};
use crate::training::{
    fit, load_params, Batch, CheckpointRecord, FitOutcome, LogitModel, TrainConfig,
    CHECKPOINT_VERSION,
};

/// The classifier-stage graph for one variant. The CAM generator is frozen
/// upstream; its maps arrive precomputed in each batch.
pub struct StageModel {
    pub variant: Variant,
    pub embedder: Option<SemanticEmbedder<f32>>,
    pub classifier: ClassifierModel<f32>,
}

impl StageModel {
    pub fn build(
        variant: Variant,
        config: &ExperimentConfig,
        n_classes: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let d = variant.embedding_channels();
        let in_channels = 3 + d;
        let embedder = if variant.has_trainable_embedding() {
            let mut embed_cfg = config.embedding.clone();
            embed_cfg.out_channels = d;
            Some(SemanticEmbedder::new(n_classes, &embed_cfg, rng)?)
        } else {
            None
        };
        let classifier = if variant.uses_attention_classifier() {
            ClassifierModel::new_attention(&config.classifier.arch, in_channels, n_classes, rng)?
        } else {
            ClassifierModel::new_plain(&config.classifier.arch, in_channels, n_classes, rng)?
        };
        Ok(Self {
            variant,
            embedder,
            classifier,
        })
    }

    fn stage_input(&mut self, batch: &Batch, train: bool) -> Result<Tensor<f32>> {
        if !self.variant.uses_cam() {
            return Ok(batch.images.clone().into_dyn());
        }
        let cams = batch
            .cams
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} needs CAM inputs", self.variant)))?
            .clone()
            .into_dyn();
        let side = batch.images.shape()[2];
        let embedding = match (&mut self.embedder, self.variant) {
            (_, Variant::ManualReshape) => manual_reshape_baseline(&cams, side)?,
            (Some(embedder), _) => embedder.embed_cam(&cams, train)?,
            (None, v) => return Err(Error::Config(format!("variant {v} lacks an embedder"))),
        };
        concat_with_image(&batch.images.clone().into_dyn(), &embedding)
    }
}

impl LogitModel for StageModel {
    fn forward_logits(&mut self, batch: &Batch, train: bool) -> Tensor<f32> {
        let input = self
            .stage_input(batch, train)
            .expect("stage input assembly validated upstream");
        self.classifier
            .forward_logits(&input, train)
            .expect("channel wiring is fixed by construction")
    }

    fn backward_from_logits(&mut self, grad_logits: &Tensor<f32>) {
        let dinput = self.classifier.backward(grad_logits);
        if let Some(embedder) = &mut self.embedder {
            // image channels 0..3 receive no updates; the embedding slice
            // drives the deconv stack
            let d4 = dinput.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let dembed = d4.slice(ndarray::s![.., 3.., .., ..]).to_owned();
            embedder.backward(&dembed.into_dyn());
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param<f32>)) {
        if let Some(embedder) = &mut self.embedder {
            embedder.visit_params("embedding", f);
        }
        self.classifier.visit_params("classifier", f);
    }
}

/// Map of sample id to its frozen activation map.
pub type CamStore = HashMap<String, Array3<f32>>;

/// Runs the frozen CAM model over `ids` once.
pub fn compute_cam_store(
    model: &mut CamModel<f32>,
    manifest: &DatasetManifest,
    dataset_root: impl AsRef<Path>,
    ids: &[String],
) -> Result<CamStore> {
    let store = ImageStore::preload(manifest, dataset_root, ids)?;
    let mut out = HashMap::with_capacity(ids.len());
    for chunk in ids.chunks(32) {
        let (images, _) = store.batch(chunk)?;
        let cams = model.forward_cam(&images.into_dyn(), false)?;
        let cams4 = cams.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for (i, id) in chunk.iter().enumerate() {
            out.insert(id.clone(), cams4.index_axis(ndarray::Axis(0), i).to_owned());
        }
    }
    Ok(out)
}

fn stack_cams(store: &CamStore, ids: &[String]) -> Result<Array4<f32>> {
    let first = store
        .get(&ids[0])
        .ok_or_else(|| Error::UnknownId(ids[0].clone()))?;
    let (c, h, w) = first.dim();
    let mut out = Array4::<f32>::zeros((ids.len(), c, h, w));
    for (i, id) in ids.iter().enumerate() {
        let cam = store.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        out.index_axis_mut(ndarray::Axis(0), i).assign(cam);
    }
    Ok(out)
}

/// Trains one variant's classifier stage against frozen CAMs.
pub fn train_classifier_stage(
    variant: Variant,
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    dataset_root: impl AsRef<Path>,
    cam_store: Option<&CamStore>,
    train_config: &TrainConfig,
) -> Result<(StageModel, FitOutcome)> {
    let n_classes = manifest.vocabulary.len();
    if variant.uses_cam() && cam_store.is_none() {
        return Err(Error::Config(format!("variant {variant} requires a CAM store")));
    }
    let train_ids = manifest.ids_for(Split::Train);
    let val_ids = manifest.ids_for(Split::Test);
    let all_ids: Vec<String> = train_ids.iter().chain(&val_ids).cloned().collect();
    let images = ImageStore::preload(manifest, dataset_root, &all_ids)?;

    let mut rng = crate::dataset::sample_rng(train_config.seed, 0xC1A5);
    let mut model = StageModel::build(variant, config, n_classes, &mut rng)?;
    let fetch = |ids: &[String]| -> Result<Batch> {
        let (images, targets) = images.batch(ids)?;
        let cams = match cam_store {
            Some(store) if variant.uses_cam() => Some(stack_cams(store, ids)?),
            _ => None,
        };
        Ok(Batch {
            images,
            cams,
            targets,
        })
    };
    let outcome = fit(&mut model, &train_ids, &val_ids, &fetch, train_config)?;
    load_params(&mut model, &outcome.best_params)?;
    Ok((model, outcome))
}

/// Prediction dump on a split: probabilities, targets, ids (manifest order).
pub fn evaluate_stage(
    model: &mut StageModel,
    manifest: &DatasetManifest,
    dataset_root: impl AsRef<Path>,
    cam_store: Option<&CamStore>,
    split: Split,
) -> Result<(Array2<f32>, Array2<f32>, Vec<String>)> {
    let ids = manifest.ids_for(split);
    if ids.is_empty() {
        return Err(Error::Eval(format!("split {split:?} is empty")));
    }
    let store = ImageStore::preload(manifest, dataset_root, &ids)?;
    let n_classes = manifest.vocabulary.len();
    let mut probs = Array2::<f32>::zeros((ids.len(), n_classes));
    let mut targets = Array2::<f32>::zeros((ids.len(), n_classes));
    let mut row = 0usize;
    for chunk in ids.chunks(32) {
        let (images, t) = store.batch(chunk)?;
        let cams = match cam_store {
            Some(s) if model.variant.uses_cam() => Some(stack_cams(s, chunk)?),
            _ => None,
        };
        let batch = Batch {
            images,
            cams,
            targets: t.clone(),
        };
        let logits = model.forward_logits(&batch, false);
        let p = predict_probabilities(&logits);
        let p2 = p.view().into_dimensionality::<Ix2>().unwrap();
        for i in 0..chunk.len() {
            for c in 0..n_classes {
                probs[[row + i, c]] = p2[[i, c]];
                targets[[row + i, c]] = t[[i, c]];
            }
        }
        row += chunk.len();
    }
    Ok((probs, targets, ids))
}

/// Builds the CAM-stage checkpoint record.
pub fn cam_checkpoint_record(
    model: &mut CamModel<f32>,
    backbone: &BackboneConfig,
    train: &TrainConfig,
    outcome: &FitOutcome,
    vocab_size: usize,
) -> Result<CheckpointRecord> {
    let mut params = Vec::new();
    model.visit_all_params("cam", &mut |name, p| {
        params.push((name.to_string(), p.value.clone()));
    });
    Ok(CheckpointRecord {
        version: CHECKPOINT_VERSION,
        epoch: outcome.best_epoch,
        vocab_size,
        config: serde_json::json!({
            "kind": "cam",
            "backbone": backbone,
            "train": train,
        }),
        history: outcome.history.clone(),
        params,
    })
}

/// Rebuilds a frozen CAM model from its checkpoint.
pub fn cam_model_from_checkpoint(record: &CheckpointRecord) -> Result<CamModel<f32>> {
    let backbone: BackboneConfig = serde_json::from_value(
        record
            .config
            .get("backbone")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint lacks backbone config".into()))?,
    )?;
    let mut rng = crate::dataset::sample_rng(0, 0);
    let mut model = CamModel::new(&backbone, record.vocab_size, &mut rng)?;
    apply_params_to_cam(&mut model, &record.params)?;
    Ok(model)
}

fn apply_params_to_cam(model: &mut CamModel<f32>, params: &[(String, ndarray::ArrayD<f32>)]) -> Result<()> {
    let map: HashMap<&str, &ndarray::ArrayD<f32>> =
        params.iter().map(|(n, v)| (n.as_str(), v)).collect();
    let mut problems = Vec::new();
    model.visit_all_params("cam", &mut |name, p| match map.get(name) {
        Some(v) if v.shape() == p.value.shape() => p.value.assign(v),
        Some(v) => problems.push(format!("{name}: {:?} vs {:?}", v.shape(), p.value.shape())),
        None => problems.push(format!("{name}: absent")),
    });
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("cam checkpoint mismatch: {}", problems.join("; "))))
    }
}

/// Stage-checkpoint metadata: the experiment config, the variant, and the
/// frozen CAM parameters ride along so evaluation is self-contained.
pub fn stage_checkpoint_record(
    model: &mut StageModel,
    cam: Option<&mut CamModel<f32>>,
    config: &ExperimentConfig,
    outcome: &FitOutcome,
    vocab_size: usize,
) -> Result<CheckpointRecord> {
    let mut params = Vec::new();
    model.visit_params(&mut |name, p| params.push((name.to_string(), p.value.clone())));
    if let Some(cam) = cam {
        cam.visit_all_params("cam", &mut |name, p| {
            params.push((name.to_string(), p.value.clone()));
        });
    }
    Ok(CheckpointRecord {
        version: CHECKPOINT_VERSION,
        epoch: outcome.best_epoch,
        vocab_size,
        config: serde_json::json!({
            "kind": "classifier",
            "experiment": config,
        }),
        history: outcome.history.clone(),
        params,
    })
}

/// Rebuilds the full inference graph (stage model plus frozen CAM when the
/// variant needs one) from a stage checkpoint.
pub fn stage_from_checkpoint(
    record: &CheckpointRecord,
) -> Result<(StageModel, Option<CamModel<f32>>, ExperimentConfig)> {
    let config: ExperimentConfig = serde_json::from_value(
        record
            .config
            .get("experiment")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint lacks experiment config".into()))?,
    )?;
    let mut rng = crate::dataset::sample_rng(0, 0);
    let mut model = StageModel::build(config.variant, &config, record.vocab_size, &mut rng)?;
    let stage_params: Vec<(String, ndarray::ArrayD<f32>)> = record
        .params
        .iter()
        .filter(|(n, _)| !n.starts_with("cam."))
        .cloned()
        .collect();
    load_params(&mut model, &stage_params)?;
    let cam = if config.variant.uses_cam() {
        let cam_params: Vec<(String, ndarray::ArrayD<f32>)> = record
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("cam."))
            .cloned()
            .collect();
        if cam_params.is_empty() {
            return Err(Error::Format(
                "checkpoint lacks CAM parameters required by the variant".into(),
            ));
        }
        let mut rng = crate::dataset::sample_rng(0, 0);
        let mut cam = CamModel::new(&config.cam.backbone, record.vocab_size, &mut rng)?;
        apply_params_to_cam(&mut cam, &cam_params)?;
        Some(cam)
    } else {
        None
    };
    Ok((model, cam, config))
}

/// One variant's evaluation artifacts inside an ablation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub report: LabelAucReport,
    pub macro_auc: Option<f64>,
}

/// All variants for one seed, same dataset and budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub variants: Vec<VariantOutcome>,
}

impl SeedOutcome {
    pub fn get(&self, variant: Variant) -> Option<&VariantOutcome> {
        self.variants.iter().find(|v| v.variant == variant)
    }
}

/// Trains the CAM stage then every variant under one seed and evaluates on
/// the test split.
pub fn run_seed(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    dataset_root: impl AsRef<Path>,
    seed: u64,
    variants: &[Variant],
) -> Result<SeedOutcome> {
    let root = dataset_root.as_ref();
    let seeded = config.clone().with_seed_training_only(seed);
    let (mut cam_model, _cam_fit) = crate::cam::train_cam_model(
        manifest,
        root,
        &seeded.cam.backbone,
        &seeded.cam.train,
    )?;
    let all_ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    let cam_store = compute_cam_store(&mut cam_model, manifest, root, &all_ids)?;

    let mut outcomes = Vec::new();
    for &variant in variants {
        let (mut model, _fit) = train_classifier_stage(
            variant,
            &seeded,
            manifest,
            root,
            variant.uses_cam().then_some(&cam_store),
            &seeded.classifier.train,
        )?;
        let (probs, targets, _) = evaluate_stage(
            &mut model,
            manifest,
            root,
            variant.uses_cam().then_some(&cam_store),
            Split::Test,
        )?;
        let report = per_label_report(&probs, &targets, &manifest.vocabulary)?;
        let macro_auc = report.macro_auc();
        outcomes.push(VariantOutcome {
            variant,
            report,
            macro_auc,
        });
    }
    Ok(SeedOutcome {
        seed,
        variants: outcomes,
    })
}

impl ExperimentConfig {
    /// Seeds only the training sections, leaving the dataset seed (and thus
    /// the generated data on disk) untouched.
    pub fn with_seed_training_only(mut self, seed: u64) -> Self {
        self.cam.train.seed = seed;
        self.classifier.train.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parameter_count;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn tiny_experiment() -> ExperimentConfig {
        let mut c = ExperimentConfig::fast();
        c.cam.backbone.stage_widths = vec![8, 16, 16, 16];
        c.cam.backbone.blocks_per_stage = vec![1, 1, 1, 1];
        c.cam.backbone.sge_groups = 4;
        c.classifier.arch.stage_widths = vec![8, 16, 16, 16];
        c.classifier.arch.blocks_per_stage = vec![1, 1, 1, 1];
        c.classifier.arch.fc_hidden = vec![16];
        c
    }

    #[test]
    fn manual_reshape_stage_has_zero_embedding_params() {
        let config = tiny_experiment();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut model = StageModel::build(Variant::ManualReshape, &config, 11, &mut rng).unwrap();
        assert!(model.embedder.is_none());
        let mut embedding_params = 0usize;
        model.visit_params(&mut |name, p| {
            if name.starts_with("embedding") {
                embedding_params += p.len();
            }
        });
        assert_eq!(embedding_params, 0);
    }

    #[test]
    fn semantic_d3_builds_six_channel_stem() {
        let config = tiny_experiment();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let model = StageModel::build(Variant::SemanticDeconvD3, &config, 11, &mut rng).unwrap();
        assert_eq!(model.classifier.in_channels(), 6);
        assert_eq!(model.embedder.as_ref().unwrap().out_channels(), 3);
    }

    #[test]
    fn plain_backbone_keeps_trainable_embedding_but_no_attention() {
        let config = tiny_experiment();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut model = StageModel::build(Variant::PlainBackbone, &config, 11, &mut rng).unwrap();
        assert!(model.embedder.is_some());
        assert_eq!(model.classifier.attention_block_count(), 0);
        assert!(parameter_count_of(&mut model, "embedding") > 0);
    }

    fn parameter_count_of(model: &mut StageModel, prefix: &str) -> usize {
        let mut n = 0;
        model.visit_params(&mut |name, p| {
            if name.starts_with(prefix) {
                n += p.len();
            }
        });
        n
    }

    #[test]
    fn rgb_baseline_forwards_without_cams() {
        let config = tiny_experiment();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut model = StageModel::build(Variant::RgbBaseline, &config, 11, &mut rng).unwrap();
        let batch = Batch {
            images: ndarray::Array4::zeros((2, 3, 64, 64)),
            cams: None,
            targets: ndarray::Array2::zeros((2, 11)),
        };
        let logits = model.forward_logits(&batch, false);
        assert_eq!(logits.shape(), &[2, 11]);
    }

    #[test]
    fn semantic_variants_forward_with_cams() {
        let config = tiny_experiment();
        for variant in [
            Variant::SemanticDeconvD1,
            Variant::SemanticDeconvD3,
            Variant::ManualReshape,
        ] {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
            let mut model = StageModel::build(variant, &config, 11, &mut rng).unwrap();
            let batch = Batch {
                images: ndarray::Array4::zeros((2, 3, 64, 64)),
                cams: Some(ndarray::Array4::zeros((2, 11, 2, 2))),
                targets: ndarray::Array2::zeros((2, 11)),
            };
            let logits = model.forward_logits(&batch, false);
            assert_eq!(logits.shape(), &[2, 11], "{variant}");
        }
    }

    #[test]
    fn stage_input_requires_cams_for_semantic_variants() {
        let config = tiny_experiment();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut model = StageModel::build(Variant::SemanticDeconvD1, &config, 11, &mut rng).unwrap();
        let batch = Batch {
            images: ndarray::Array4::zeros((1, 3, 64, 64)),
            cams: None,
            targets: ndarray::Array2::zeros((1, 11)),
        };
        assert!(model.stage_input(&batch, false).is_err());
    }

    #[test]
    fn embedding_gradients_flow_through_concat_slice() {
        let config = tiny_experiment();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut model = StageModel::build(Variant::SemanticDeconvD1, &config, 11, &mut rng).unwrap();
        let batch = Batch {
            images: ndarray::Array4::from_shape_fn((1, 3, 64, 64), |(_, c, y, x)| {
                ((c + y + x) as f32 * 0.13).sin()
            }),
            cams: Some(ndarray::Array4::from_shape_fn((1, 11, 2, 2), |(_, c, y, x)| {
                ((c * 4 + y * 2 + x) as f32 * 0.37).cos()
            })),
            targets: ndarray::Array2::zeros((1, 11)),
        };
        model.visit_params(&mut |_, p| p.zero_grad());
        let logits = model.forward_logits(&batch, true);
        let grad = Tensor::<f32>::from_elem(IxDyn(logits.shape()), 1.0);
        model.backward_from_logits(&grad);
        let mut embed_grad_norm = 0.0f32;
        model.visit_params(&mut |name, p| {
            if name.starts_with("embedding") {
                embed_grad_norm += p.grad.iter().map(|g| g * g).sum::<f32>();
            }
        });
        assert!(embed_grad_norm > 0.0, "no gradient reached the embedding stack");
    }
}

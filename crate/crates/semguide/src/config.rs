//! Experiment configuration: one JSON document with dataset, CAM-stage,
//! embedding, classifier-stage, and evaluation sections plus the wiring
//! variant. `SEMGUIDE_CONFIG` may supply a default path.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::BackboneConfig;
use crate::classifier::SplitAttentionConfig;
use crate::dataset::SceneConfig;
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const CONFIG_ENV: &str = "SEMGUIDE_CONFIG";

/// Which model graph the classifier stage wires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Frozen CAM -> learnable 5-layer deconv (D=1) -> concat -> attention classifier.
    SemanticDeconvD1,
    /// Same with a 3-channel embedding.
    SemanticDeconvD3,
    /// Non-learnable bilinear reshape instead of the deconv stack.
    ManualReshape,
    /// Learnable embedding but a plain-convolution classifier.
    PlainBackbone,
    /// Raw RGB into the attention classifier; no CAM, no embedding.
    RgbBaseline,
}

impl Variant {
    pub fn all() -> [Variant; 5] {
        [
            Variant::RgbBaseline,
            Variant::SemanticDeconvD1,
            Variant::ManualReshape,
            Variant::PlainBackbone,
            Variant::SemanticDeconvD3,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::SemanticDeconvD1 => "semantic_deconv_d1",
            Variant::SemanticDeconvD3 => "semantic_deconv_d3",
            Variant::ManualReshape => "manual_reshape",
            Variant::PlainBackbone => "plain_backbone",
            Variant::RgbBaseline => "rgb_baseline",
        }
    }

    /// Extra input channels besides RGB.
    pub fn embedding_channels(&self) -> usize {
        match self {
            Variant::SemanticDeconvD3 => 3,
            Variant::RgbBaseline => 0,
            _ => 1,
        }
    }

    pub fn uses_cam(&self) -> bool {
        !matches!(self, Variant::RgbBaseline)
    }

    pub fn has_trainable_embedding(&self) -> bool {
        matches!(
            self,
            Variant::SemanticDeconvD1 | Variant::SemanticDeconvD3 | Variant::PlainBackbone
        )
    }

    pub fn uses_attention_classifier(&self) -> bool {
        !matches!(self, Variant::PlainBackbone)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic_deconv_d1" => Ok(Variant::SemanticDeconvD1),
            "semantic_deconv_d3" => Ok(Variant::SemanticDeconvD3),
            "manual_reshape" => Ok(Variant::ManualReshape),
            "plain_backbone" => Ok(Variant::PlainBackbone),
            "rgb_baseline" => Ok(Variant::RgbBaseline),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected one of semantic_deconv_d1, \
                 semantic_deconv_d3, manual_reshape, plain_backbone, rgb_baseline"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    pub scene: SceneConfig,
    pub n_samples: usize,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CamSection {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierSection {
    pub arch: SplitAttentionConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSection {
    pub render_plots: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub cam: CamSection,
    pub embedding: EmbeddingConfig,
    pub classifier: ClassifierSection,
    pub evaluation: EvaluationSection,
    pub variant: Variant,
}

impl ExperimentConfig {
    /// CI preset: 64px images, 2000 train / 600 test, halved widths, short
    /// high-rate schedules.
    pub fn fast() -> Self {
        let mut scene = SceneConfig::default();
        scene.image_size = 64;
        let cam_train = TrainConfig {
            initial_lr: 2e-3,
            max_epochs: 5,
            batch_size: 32,
            ..Default::default()
        };
        let classifier_train = TrainConfig {
            initial_lr: 2e-3,
            max_epochs: 5,
            batch_size: 32,
            ..Default::default()
        };
        Self {
            dataset: DatasetSection {
                scene,
                n_samples: 2600,
                train_fraction: 2000.0 / 2600.0,
            },
            cam: CamSection {
                backbone: BackboneConfig::fast(),
                train: cam_train,
            },
            embedding: EmbeddingConfig::default(),
            classifier: ClassifierSection {
                arch: SplitAttentionConfig::fast(),
                train: classifier_train,
            },
            evaluation: EvaluationSection { render_plots: true },
            variant: Variant::SemanticDeconvD1,
        }
    }

    /// Full-scale preset: 256px images and the published training recipe
    /// (1e-5 with plateau reduction). CPU-days of compute; use the fast
    /// preset for iteration.
    pub fn full() -> Self {
        Self {
            dataset: DatasetSection {
                scene: SceneConfig::default(),
                n_samples: 10_000,
                train_fraction: 0.7,
            },
            cam: CamSection {
                backbone: BackboneConfig::default(),
                train: TrainConfig::default(),
            },
            embedding: EmbeddingConfig::default(),
            classifier: ClassifierSection {
                arch: SplitAttentionConfig::default(),
                train: TrainConfig::default(),
            },
            evaluation: EvaluationSection { render_plots: true },
            variant: Variant::SemanticDeconvD1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fast" => Ok(Self::fast()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected fast or full"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        if self.dataset.n_samples < 10 {
            return Err(Error::Config("dataset.n_samples must be at least 10".into()));
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return Err(Error::Config("dataset.train_fraction must be in (0, 1)".into()));
        }
        self.cam.backbone.validate()?;
        self.cam.train.validate()?;
        self.embedding.validate()?;
        self.classifier.arch.validate()?;
        self.classifier.train.validate()?;
        let stride = self.cam.backbone.total_stride();
        if self.dataset.scene.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by backbone stride {stride}",
                self.dataset.scene.image_size
            )));
        }
        // instance norm needs a >= 2px final grid, and patches must remain
        // resolvable at the CAM stride
        if self.dataset.scene.image_size / stride < 2 {
            return Err(Error::Config(format!(
                "image_size {} too small for stride {stride}",
                self.dataset.scene.image_size
            )));
        }
        Ok(())
    }

    /// Rewires every seed in the document (scene + both train sections).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.scene.seed = seed;
        self.cam.train.seed = seed;
        self.classifier.train.seed = seed;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::fast().validate().unwrap();
        ExperimentConfig::full().validate().unwrap();
    }

    #[test]
    fn fast_preset_splits_2000_600() {
        let c = ExperimentConfig::fast();
        let train = (c.dataset.n_samples as f64 * c.dataset.train_fraction).round() as usize;
        assert_eq!(train, 2000);
        assert_eq!(c.dataset.n_samples - train, 600);
    }

    #[test]
    fn config_round_trip_is_identity() {
        let config = ExperimentConfig::fast().with_seed(3);
        let json = serde_json::to_string(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        let json2 = serde_json::to_string(&back).unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::all() {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn variant_channel_wiring() {
        assert_eq!(Variant::SemanticDeconvD1.embedding_channels(), 1);
        assert_eq!(Variant::SemanticDeconvD3.embedding_channels(), 3);
        assert_eq!(Variant::RgbBaseline.embedding_channels(), 0);
        assert!(!Variant::RgbBaseline.uses_cam());
        assert!(!Variant::ManualReshape.has_trainable_embedding());
        assert!(!Variant::PlainBackbone.uses_attention_classifier());
        assert!(Variant::PlainBackbone.has_trainable_embedding());
    }
}

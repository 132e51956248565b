//! Lesion patch classifier: a frozen feature extractor followed by a trainable
//! affine head with per-class sigmoid outputs.

mod backbone;
mod head;
mod resnet;
mod train;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, LesionPatch};
use crate::error::{Error, IoContext, Result};
use crate::imageops::GrayImage;

pub use backbone::{Backbone, FeatureMap, FilterbankBackbone, FEATURE_DIM};
pub use head::{bce_with_logits, sigmoid, HeadGrad, LinearHead};
pub use resnet::ResNet50Backbone;
pub use train::{select_best_epoch, train_head, EpochRecord, FeatureSet, TrainConfig, TrainingHistory};

pub const CLASSIFIER_SCHEMA: &str = "zoomshift-classifier/1";

/// Single-plane approximation of the usual natural-image channel statistics.
pub(crate) const GRAY_MEAN: f32 = 0.449;
pub(crate) const GRAY_STD: f32 = 0.226;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneKind {
    /// Deterministic built-in extractor that needs no weight file.
    Filterbank,
    /// ResNet50 with weights from a safetensors file using torchvision names.
    Resnet50 { weights: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub backbone: BackboneKind,
    /// Standardize inputs with natural-image statistics before the backbone.
    pub standardize_inputs: bool,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            backbone: BackboneKind::Filterbank,
            standardize_inputs: false,
        }
    }
}

impl BackboneSpec {
    pub fn load(&self) -> Result<Arc<dyn Backbone>> {
        Ok(match &self.backbone {
            BackboneKind::Filterbank => Arc::new(FilterbankBackbone::new().standardized(self.standardize_inputs)),
            BackboneKind::Resnet50 { weights } => Arc::new(ResNet50Backbone::load(weights, self.standardize_inputs)?),
        })
    }
}

/// Class names for a head with `num_classes` outputs.
pub fn class_names(num_classes: usize) -> Result<Vec<String>> {
    match num_classes {
        3 => Ok(ClassLabel::ORDER.iter().map(|c| c.name().to_string()).collect()),
        2 => Ok(vec!["healthy".into(), "lesion".into()]),
        n => Err(Error::Config(format!("unsupported number of classes {n}; expected 2 or 3"))),
    }
}

#[derive(Clone)]
pub struct ClassifierModel {
    pub backbone: Arc<dyn Backbone>,
    pub spec: BackboneSpec,
    pub head: LinearHead,
    pub class_order: Vec<String>,
}

impl std::fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("backbone", &self.backbone.identifier())
            .field("class_order", &self.class_order)
            .field("trainable_params", &self.trainable_params())
            .finish()
    }
}

/// Frozen backbone plus a freshly initialized head.
pub fn build_classifier(num_classes: usize, spec: &BackboneSpec, head_seed: u64) -> Result<ClassifierModel> {
    let backbone = spec.load()?;
    build_classifier_with(num_classes, backbone, spec.clone(), head_seed)
}

/// As [`build_classifier`] with an already loaded backbone.
pub fn build_classifier_with(
    num_classes: usize,
    backbone: Arc<dyn Backbone>,
    spec: BackboneSpec,
    head_seed: u64,
) -> Result<ClassifierModel> {
    Ok(ClassifierModel {
        class_order: class_names(num_classes)?,
        head: LinearHead::new(num_classes, FEATURE_DIM, head_seed),
        backbone,
        spec,
    })
}

impl ClassifierModel {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn trainable_params(&self) -> usize {
        self.head.num_params()
    }

    /// Output index for a patch label under this model's class order.
    pub fn target_index(&self, label: ClassLabel) -> usize {
        if self.num_classes() == 2 {
            (label != ClassLabel::Healthy) as usize
        } else {
            label.index()
        }
    }

    pub fn features(&self, patch: &LesionPatch) -> Result<Vec<f32>> {
        patch.validate()?;
        self.backbone.features(&patch.pixels)
    }

    pub fn image_features(&self, pixels: &GrayImage) -> Result<Vec<f32>> {
        self.backbone.features(pixels)
    }

    pub fn extract_features(&self, patches: &[LesionPatch]) -> Result<Vec<Vec<f32>>> {
        patches.iter().map(|p| self.features(p)).collect()
    }

    /// Sigmoid score per class for each patch.
    pub fn predict_proba(&self, patches: &[LesionPatch]) -> Result<Vec<Vec<f64>>> {
        patches.iter().map(|p| Ok(self.head.scores(&self.features(p)?))).collect()
    }
}

/// Index of the largest score; ties go to the earlier class.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per-sample sampling weights for train and validation draws.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplingWeights {
    pub train: Option<Vec<f64>>,
    pub val: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub history: TrainingHistory,
}

/// Trains the head of `model` on the patches and returns the best-validation
/// checkpoint with the per-epoch history.
pub fn train_classifier(
    model: &ClassifierModel,
    train: &[LesionPatch],
    val: &[LesionPatch],
    cfg: &TrainConfig,
    weights: &SamplingWeights,
    seed: u64,
) -> Result<TrainedClassifier> {
    let feats = |set: &[LesionPatch]| model.extract_features(set);
    let labels = |set: &[LesionPatch]| set.iter().map(|p| model.target_index(p.class_label)).collect::<Vec<_>>();
    let (tf, vf) = (feats(train)?, feats(val)?);
    let (tl, vl) = (labels(train), labels(val));
    let tr: Vec<&[f32]> = tf.iter().map(Vec::as_slice).collect();
    let va: Vec<&[f32]> = vf.iter().map(Vec::as_slice).collect();
    let (head, history) = train_head(
        &model.head,
        FeatureSet {
            features: &tr,
            labels: &tl,
            weights: weights.train.as_deref(),
        },
        FeatureSet {
            features: &va,
            labels: &vl,
            weights: weights.val.as_deref(),
        },
        cfg,
        seed,
    )?;
    let mut model = model.clone();
    model.head = head;
    Ok(TrainedClassifier { model, history })
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    backbone_id: String,
    spec: BackboneSpec,
    class_order: Vec<String>,
    head: LinearHead,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

pub fn save_classifier(model: &ClassifierModel, cfg: Option<&TrainConfig>, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        schema: CLASSIFIER_SCHEMA.into(),
        backbone_id: model.backbone.identifier(),
        spec: model.spec.clone(),
        class_order: model.class_order.clone(),
        head: model.head.clone(),
        train_config: cfg.cloned(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&ck)?).at(path)
}

/// Loads a checkpoint, rebuilding its backbone and checking it is the one the
/// head was trained on.
pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let bytes = std::fs::read(path).at(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)?;
    if ck.schema != CLASSIFIER_SCHEMA {
        return Err(Error::Config(format!("unsupported classifier schema {:?}", ck.schema)));
    }
    let backbone = ck.spec.load()?;
    if backbone.identifier() != ck.backbone_id {
        return Err(Error::Config(format!(
            "checkpoint expects backbone {} but {} was loaded",
            ck.backbone_id,
            backbone.identifier()
        )));
    }
    if ck.head.weight.len() != ck.head.num_classes * ck.head.dim
        || ck.head.bias.len() != ck.head.num_classes
        || ck.head.dim != FEATURE_DIM
        || ck.class_order.len() != ck.head.num_classes
    {
        return Err(Error::Shape("classifier head dimensions are inconsistent".into()));
    }
    Ok(ClassifierModel {
        backbone,
        spec: ck.spec,
        head: ck.head,
        class_order: ck.class_order,
    })
}

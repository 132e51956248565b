//! Mammogram records, zoom-group patch extraction, phantom data, patient-wise
//! splits and class-balancing sampler weights.

mod geometry;
pub mod io;
mod patches;
mod phantom;
mod sampler;
mod splits;

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::GrayImage;

pub use geometry::{expand_bbox, tight_bbox, BoundingBox, Extent};
pub use patches::{
    extract_lesion_patches, extract_patch, sample_healthy_patches, HealthySampling, PATCH_SIZE,
};
pub use phantom::{generate_phantom_dataset, generate_phantom_dataset_with, PhantomConfig};
pub use sampler::{weighted_sampler_weights, WeightedSampler};
pub use splits::{
    make_splits, make_splits_by_counts, patient_sample_counts, Partition, SplitAssignment,
    SplitFractions, SplitMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Film,
    Digital,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiopsyLabel {
    None,
    Benign,
    Malignant,
}

/// Patch class, in the fixed order used by classifier outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Healthy,
    Benign,
    Malignant,
}

impl ClassLabel {
    pub const ORDER: [ClassLabel; 3] = [ClassLabel::Healthy, ClassLabel::Benign, ClassLabel::Malignant];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Healthy => 0,
            ClassLabel::Benign => 1,
            ClassLabel::Malignant => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        Self::ORDER.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Healthy => "healthy",
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
        }
    }

    pub fn from_biopsy(label: BiopsyLabel) -> ClassLabel {
        match label {
            BiopsyLabel::None => ClassLabel::Healthy,
            BiopsyLabel::Benign => ClassLabel::Benign,
            BiopsyLabel::Malignant => ClassLabel::Malignant,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "healthy" | "normal" | "none" => Ok(ClassLabel::Healthy),
            "benign" => Ok(ClassLabel::Benign),
            "malignant" => Ok(ClassLabel::Malignant),
            other => Err(Error::Config(format!("unknown class label {other:?}"))),
        }
    }
}

/// Level of zoom around a lesion: 1x, 2x or 3x the tight box height and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ZoomGroup {
    G1,
    G2,
    G3,
}

impl ZoomGroup {
    pub const ALL: [ZoomGroup; 3] = [ZoomGroup::G1, ZoomGroup::G2, ZoomGroup::G3];

    pub fn expansion_factor(self) -> usize {
        match self {
            ZoomGroup::G1 => 1,
            ZoomGroup::G2 => 2,
            ZoomGroup::G3 => 3,
        }
    }
}

impl fmt::Display for ZoomGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.expansion_factor())
    }
}

impl std::str::FromStr for ZoomGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "G1" | "1" => Ok(ZoomGroup::G1),
            "G2" | "2" => Ok(ZoomGroup::G2),
            "G3" | "3" => Ok(ZoomGroup::G3),
            other => Err(Error::Config(format!("unknown zoom group {other:?}"))),
        }
    }
}

/// One mammogram with its optional lesion annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MammogramRecord {
    pub image_id: String,
    pub patient_id: String,
    pub modality: Modality,
    pub pixels: GrayImage,
    pub lesion_mask: Option<Array2<bool>>,
    pub biopsy_label: BiopsyLabel,
}

impl MammogramRecord {
    /// Builds a record, checking shape, label/mask consistency and intensity range.
    pub fn new(
        image_id: impl Into<String>,
        patient_id: impl Into<String>,
        modality: Modality,
        pixels: GrayImage,
        lesion_mask: Option<Array2<bool>>,
        biopsy_label: BiopsyLabel,
    ) -> Result<Self> {
        let record = MammogramRecord {
            image_id: image_id.into(),
            patient_id: patient_id.into(),
            modality,
            pixels,
            lesion_mask,
            biopsy_label,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            id: self.image_id.clone(),
            reason,
        };
        if let Some(mask) = &self.lesion_mask {
            if mask.dim() != self.pixels.dim() {
                return Err(bad(format!(
                    "mask shape {:?} differs from image shape {:?}",
                    mask.dim(),
                    self.pixels.dim()
                )));
            }
        }
        if self.biopsy_label != BiopsyLabel::None
            && !self.lesion_mask.as_ref().is_some_and(|m| m.iter().any(|&v| v))
        {
            return Err(bad("biopsy-labelled image without a nonempty lesion mask".into()));
        }
        if self.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(bad("intensities outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn class_label(&self) -> ClassLabel {
        ClassLabel::from_biopsy(self.biopsy_label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic { model_id: String },
    /// Duplicate of a real training patch added by oversampling.
    Oversampled { source_patch_id: String },
}

impl Provenance {
    pub fn is_real(&self) -> bool {
        matches!(self, Provenance::Real)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Real => f.write_str("real"),
            Provenance::Synthetic { model_id } => write!(f, "synthetic:{model_id}"),
            Provenance::Oversampled { source_patch_id } => write!(f, "oversampled:{source_patch_id}"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "real" {
            return Ok(Provenance::Real);
        }
        if let Some(id) = s.strip_prefix("synthetic:") {
            return Ok(Provenance::Synthetic { model_id: id.into() });
        }
        if let Some(id) = s.strip_prefix("oversampled:") {
            return Ok(Provenance::Oversampled {
                source_patch_id: id.into(),
            });
        }
        Err(Error::Config(format!("unknown provenance {s:?}")))
    }
}

/// A `PATCH_SIZE` x `PATCH_SIZE` normalized grayscale patch.
///
/// Only one plane is stored; [`LesionPatch::channels`] replicates it into the
/// three identical channels the classifier consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionPatch {
    pub patch_id: String,
    pub pixels: GrayImage,
    pub zoom_group: ZoomGroup,
    pub class_label: ClassLabel,
    pub source_image_id: String,
    pub patient_id: String,
    pub provenance: Provenance,
}

impl LesionPatch {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.dim() != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::Shape(format!(
                "patch {} has shape {:?}, expected ({PATCH_SIZE}, {PATCH_SIZE})",
                self.patch_id,
                self.pixels.dim()
            )));
        }
        if self.pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Shape(format!(
                "patch {} has values outside [0, 1]",
                self.patch_id
            )));
        }
        Ok(())
    }

    /// `(3, PATCH_SIZE, PATCH_SIZE)` channel-major buffer with identical planes.
    pub fn channels(&self) -> Vec<f32> {
        let plane: Vec<f32> = self.pixels.iter().copied().collect();
        let mut out = Vec::with_capacity(plane.len() * 3);
        for _ in 0..3 {
            out.extend_from_slice(&plane);
        }
        out
    }
}

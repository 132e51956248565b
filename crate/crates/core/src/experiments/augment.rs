//! Training-set balancing with SinGAN samples or duplicated real patches, and
//! the random-resized-crop test probe.

use ndarray::s;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, LesionPatch, Provenance, ZoomGroup, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::imageops::{normalize_min_max, resize};
use crate::seeding::{derive_seed, rng_for};
use crate::singan::{sample, SinGANModel};

/// Number of `target` patches missing to match the largest other lesion class.
pub fn balance_deficit(patches: &[LesionPatch], target: ClassLabel) -> usize {
    label_deficit(patches.iter().map(|p| p.class_label), target)
}

/// As [`balance_deficit`] over bare labels.
pub fn label_deficit(labels: impl IntoIterator<Item = ClassLabel>, target: ClassLabel) -> usize {
    let mut counts = [0usize; 3];
    labels.into_iter().for_each(|c| counts[c.index()] += 1);
    let majority = ClassLabel::ORDER
        .iter()
        .filter(|&&c| c != ClassLabel::Healthy && c != target)
        .map(|&c| counts[c.index()])
        .max()
        .unwrap_or(0);
    majority.saturating_sub(counts[target.index()])
}

/// Splits `total` over `parts` as evenly as possible; earlier parts take the remainder.
pub fn split_counts(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// A trained SinGAN together with the identity of its training patch.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSource<'a> {
    pub model_id: &'a str,
    pub patient_id: &'a str,
    pub model: &'a SinGANModel,
}

/// Converts a generated image into a classifier patch.
pub fn synthetic_patch(image: &crate::imageops::GrayImage, source: &SyntheticSource<'_>, label: ClassLabel, tag: &str) -> LesionPatch {
    let pixels = if image.dim() == (PATCH_SIZE, PATCH_SIZE) {
        normalize_min_max(image)
    } else {
        normalize_min_max(&resize(image, PATCH_SIZE, PATCH_SIZE))
    };
    LesionPatch {
        patch_id: format!("syn_{}_{tag}", source.model_id),
        pixels,
        zoom_group: ZoomGroup::G1,
        class_label: label,
        source_image_id: source.model.training_image_id.clone(),
        patient_id: source.patient_id.to_string(),
        provenance: Provenance::Synthetic {
            model_id: source.model_id.to_string(),
        },
    }
}

/// `total` synthetic `target` patches, split evenly over the models with the
/// remainder going to earlier models.
pub fn generate_synthetic(models: &[SyntheticSource<'_>], target: ClassLabel, total: usize, seed: u64) -> Result<Vec<LesionPatch>> {
    if models.is_empty() {
        return Err(Error::Config("augmentation needs at least one SinGAN model".into()));
    }
    let mut out = Vec::with_capacity(total);
    for (j, (source, count)) in models.iter().zip(split_counts(total, models.len())).enumerate() {
        let sample_seed = derive_seed(seed, &[j as u64]);
        for (k, img) in sample(source.model, count, sample_seed).iter().enumerate() {
            out.push(synthetic_patch(img, source, target, &format!("{sample_seed:016x}_{k}")));
        }
    }
    Ok(out)
}

/// Appends synthetic `target` patches until the target class matches the
/// majority lesion class (or `total` patches when given).
pub fn assemble_augmented_trainset(
    base: &[LesionPatch],
    models: &[SyntheticSource<'_>],
    target: ClassLabel,
    total: Option<usize>,
    seed: u64,
) -> Result<Vec<LesionPatch>> {
    let total = total.unwrap_or_else(|| balance_deficit(base, target));
    if total == 0 {
        log::warn!("class {target} is not a minority; nothing to balance");
    }
    let mut out = base.to_vec();
    out.extend(generate_synthetic(models, target, total, seed)?);
    Ok(out)
}

/// Appends duplicates of `sources`, round-robin, until the target class
/// matches the majority lesion class.
pub fn oversample_images(sources: &[LesionPatch], base: &[LesionPatch], target: ClassLabel) -> Result<Vec<LesionPatch>> {
    if sources.is_empty() {
        return Err(Error::Config("oversampling needs at least one source patch".into()));
    }
    if let Some(p) = sources.iter().find(|p| p.class_label != target) {
        return Err(Error::Config(format!("oversampling source {} is not {target}", p.patch_id)));
    }
    let deficit = balance_deficit(base, target);
    let mut out = base.to_vec();
    if deficit == 0 {
        log::warn!("class {target} is not a minority; nothing to oversample");
    }
    for k in 0..deficit {
        let src = &sources[k % sources.len()];
        let mut dup = src.clone();
        dup.patch_id = format!("{}_dup{}", src.patch_id, k / sources.len());
        dup.provenance = Provenance::Oversampled {
            source_patch_id: src.patch_id.clone(),
        };
        out.push(dup);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Range of the crop area as a fraction of the patch area.
    pub scale: (f64, f64),
    /// Range of the crop width-to-height ratio.
    pub ratio: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            scale: (0.5, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.scale;
        let (r0, r1) = self.ratio;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) || !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::Config(format!("infeasible crop ranges {self:?}")));
        }
        Ok(())
    }
}

/// Crop window `(row0, col0, height, width)` inside a `side` x `side` patch.
fn crop_window<R: Rng>(rng: &mut R, side: usize, cfg: &CropConfig) -> Result<(usize, usize, usize, usize)> {
    cfg.validate()?;
    let area = (side * side) as f64;
    let (s0, s1) = cfg.scale;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    let in_range = |h: usize, w: usize| {
        let frac = (h * w) as f64 / area;
        h > 0 && w > 0 && h <= side && w <= side && frac >= s0 && frac <= s1
    };
    for _ in 0..10 {
        let target = area * rng.random_range(s0..=s1);
        let ratio = if lr0 < lr1 { rng.random_range(lr0..=lr1).exp() } else { cfg.ratio.0 };
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if in_range(h, w) {
            let r = rng.random_range(0..=side - h);
            let c = rng.random_range(0..=side - w);
            return Ok((r, c, h, w));
        }
    }
    // fall back to a centred square of the largest admissible area
    let mut s = ((s1 * area).sqrt().floor() as usize).min(side);
    while s > 0 && !in_range(s, s) {
        s -= 1;
    }
    if s == 0 {
        return Err(Error::Config(format!("no {side}px crop satisfies {cfg:?}")));
    }
    Ok(((side - s) / 2, (side - s) / 2, s, s))
}

/// Random sub-rectangle of the patch resized back to full size.
pub fn random_resized_crop(patch: &LesionPatch, cfg: &CropConfig, seed: u64) -> Result<LesionPatch> {
    patch.validate()?;
    let mut rng = rng_for(seed, &[0xc209]);
    let (r, c, h, w) = crop_window(&mut rng, PATCH_SIZE, cfg)?;
    let crop = patch.pixels.slice(s![r..r + h, c..c + w]).to_owned();
    let mut out = patch.clone();
    out.pixels = resize(&crop, PATCH_SIZE, PATCH_SIZE);
    Ok(out)
}

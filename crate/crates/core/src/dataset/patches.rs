use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{expand_bbox, tight_bbox, BoundingBox};
use super::{BiopsyLabel, ClassLabel, LesionPatch, MammogramRecord, Provenance, ZoomGroup};
use crate::error::{Error, Result};
use crate::imageops::{normalize_min_max, resize, GrayImage};

/// Side length of every classifier patch.
pub const PATCH_SIZE: usize = 224;

/// Crops the box's clamped extent, resizes to `PATCH_SIZE`, and min-max normalizes.
pub fn extract_patch(
    record: &MammogramRecord,
    bbox: &BoundingBox,
    group: ZoomGroup,
    label: ClassLabel,
) -> Result<LesionPatch> {
    let (rows, cols) = record.pixels.dim();
    let e = bbox.extent;
    if e.height() == 0 || e.width() == 0 || !e.within(rows, cols) {
        return Err(Error::InvalidBox(format!(
            "{e:?} in image {} of shape {:?}",
            record.image_id,
            (rows, cols)
        )));
    }
    let crop = record
        .pixels
        .slice(s![e.row0..e.row1, e.col0..e.col1])
        .to_owned();
    let pixels = normalize_min_max(&resize(&crop, PATCH_SIZE, PATCH_SIZE));
    Ok(LesionPatch {
        patch_id: format!("{}_{}", record.image_id, group),
        pixels,
        zoom_group: group,
        class_label: label,
        source_image_id: record.image_id.clone(),
        patient_id: record.patient_id.clone(),
        provenance: Provenance::Real,
    })
}

/// One patch per requested zoom group around the record's lesion.
pub fn extract_lesion_patches(record: &MammogramRecord, groups: &[ZoomGroup]) -> Result<Vec<LesionPatch>> {
    let mask = record.lesion_mask.as_ref().ok_or(Error::EmptyMask)?;
    let tight = tight_bbox(mask)?;
    groups
        .iter()
        .map(|&g| {
            let b = expand_bbox(&tight, g, record.pixels.dim());
            extract_patch(record, &b, g, record.class_label())
        })
        .collect()
}

/// How healthy crops are drawn from a normal mammogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthySampling {
    /// Candidate crop sides, sampled uniformly (typically lesion-box sides of one zoom group).
    pub sides: Vec<usize>,
    /// Intensity above which a pixel counts as breast tissue.
    pub foreground_threshold: f32,
    /// Zoom group recorded on the produced patches.
    pub group: ZoomGroup,
    pub max_attempts: usize,
}

impl Default for HealthySampling {
    fn default() -> Self {
        HealthySampling {
            sides: vec![24],
            foreground_threshold: 0.1,
            group: ZoomGroup::G1,
            max_attempts: 2000,
        }
    }
}

/// Summed-area table with one row/column of zero padding.
fn integral(mask: &Array2<bool>) -> Array2<u32> {
    let (h, w) = mask.dim();
    let mut acc = Array2::<u32>::zeros((h + 1, w + 1));
    for r in 0..h {
        for c in 0..w {
            acc[[r + 1, c + 1]] = mask[[r, c]] as u32 + acc[[r, c + 1]] + acc[[r + 1, c]] - acc[[r, c]];
        }
    }
    acc
}

fn window_sum(acc: &Array2<u32>, r0: usize, c0: usize, side: usize) -> u32 {
    let (r1, c1) = (r0 + side, c0 + side);
    acc[[r1, c1]] + acc[[r0, c0]] - acc[[r0, c1]] - acc[[r1, c0]]
}

/// Foreground mask used for healthy sampling.
pub fn breast_foreground(img: &GrayImage, threshold: f32) -> Array2<bool> {
    img.mapv(|v| v > threshold)
}

/// Square crop windows `(row0, col0, side)` lying entirely inside the breast region.
pub(crate) fn draw_healthy_windows(
    record: &MammogramRecord,
    count: usize,
    seed: u64,
    sampling: &HealthySampling,
) -> Result<Vec<(usize, usize, usize)>> {
    if sampling.sides.is_empty() || sampling.sides.contains(&0) {
        return Err(Error::Config("healthy sampling needs positive crop sides".into()));
    }
    let (rows, cols) = record.pixels.dim();
    let fg = breast_foreground(&record.pixels, sampling.foreground_threshold);
    let acc = integral(&fg);
    let min_side = *sampling.sides.iter().min().expect("nonempty");
    let fits = |r0: usize, c0: usize, side: usize| {
        r0 + side <= rows && c0 + side <= cols && window_sum(&acc, r0, c0, side) as usize == side * side
    };
    let insufficient = || Error::InsufficientTissue {
        image_id: record.image_id.clone(),
        side: min_side,
    };
    if count == 0 {
        return Ok(Vec::new());
    }
    let feasible = min_side <= rows.min(cols)
        && (0..=rows - min_side).any(|r| (0..=cols - min_side).any(|c| fits(r, c, min_side)));
    if !feasible {
        return Err(insufficient());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut windows = Vec::with_capacity(count);
    let mut attempts = 0;
    while windows.len() < count {
        attempts += 1;
        if attempts > sampling.max_attempts * count {
            return Err(insufficient());
        }
        let mut side = sampling.sides[rng.random_range(0..sampling.sides.len())];
        if side > rows.min(cols) {
            side = min_side;
        }
        let r0 = rng.random_range(0..=rows - side);
        let c0 = rng.random_range(0..=cols - side);
        if fits(r0, c0, side) {
            windows.push((r0, c0, side));
        }
    }
    Ok(windows)
}

/// Draws `count` healthy patches from square crops inside the thresholded breast region.
pub fn sample_healthy_patches(
    record: &MammogramRecord,
    count: usize,
    seed: u64,
    sampling: &HealthySampling,
) -> Result<Vec<LesionPatch>> {
    if record.biopsy_label != BiopsyLabel::None {
        return Err(Error::InvalidRecord {
            id: record.image_id.clone(),
            reason: "healthy patches are only drawn from normal mammograms".into(),
        });
    }
    let windows = draw_healthy_windows(record, count, seed, sampling)?;
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(k, (r0, c0, side))| {
            let crop = record.pixels.slice(s![r0..r0 + side, c0..c0 + side]).to_owned();
            LesionPatch {
                patch_id: format!("{}_h{}_{}", record.image_id, sampling.group, k),
                pixels: normalize_min_max(&resize(&crop, PATCH_SIZE, PATCH_SIZE)),
                zoom_group: sampling.group,
                class_label: ClassLabel::Healthy,
                source_image_id: record.image_id.clone(),
                patient_id: record.patient_id.clone(),
                provenance: Provenance::Real,
            }
        })
        .collect())
}

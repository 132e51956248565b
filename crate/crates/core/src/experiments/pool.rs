//! All real patches an experiment draws from: lesion patches in every zoom
//! group plus healthy crops sized like the lesion boxes of each group.

use std::collections::BTreeMap;

use super::config::{DataConfig, DataSource};
use crate::dataset::io::read_manifest;
use crate::dataset::{
    extract_lesion_patches, generate_phantom_dataset_with, sample_healthy_patches, tight_bbox, HealthySampling,
    LesionPatch, MammogramRecord, ZoomGroup,
};
use crate::error::{Error, Result};
use crate::seeding::{derive_seed, label_hash};

pub fn load_records(cfg: &DataConfig) -> Result<Vec<MammogramRecord>> {
    match &cfg.source {
        DataSource::Phantom {
            n_patients,
            prevalence,
            seed,
            phantom,
        } => Ok(generate_phantom_dataset_with(phantom, *n_patients, *prevalence, *seed)),
        DataSource::Manifest { path } => read_manifest(path),
    }
}

/// Lesion patches for every group, then healthy patches whose crop sides are
/// drawn from the lesion box sides of the same group.
pub fn build_patch_pool(records: &[MammogramRecord], cfg: &DataConfig) -> Result<Vec<LesionPatch>> {
    let mut pool = Vec::new();
    let mut sides: BTreeMap<ZoomGroup, Vec<usize>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.lesion_mask.is_some()) {
        let tight = tight_bbox(r.lesion_mask.as_ref().expect("checked"))?;
        for g in ZoomGroup::ALL {
            sides.entry(g).or_default().push(tight.height.max(tight.width) * g.expansion_factor());
        }
        pool.extend(extract_lesion_patches(r, &ZoomGroup::ALL)?);
    }
    let normals: Vec<&MammogramRecord> = records.iter().filter(|r| r.lesion_mask.is_none()).collect();
    if cfg.healthy_per_image > 0 && !normals.is_empty() {
        if sides.is_empty() {
            return Err(Error::Config("healthy crop sizes need at least one lesion in the dataset".into()));
        }
        for r in normals {
            for g in ZoomGroup::ALL {
                let sampling = HealthySampling {
                    sides: sides[&g].clone(),
                    foreground_threshold: cfg.healthy_threshold,
                    group: g,
                    ..HealthySampling::default()
                };
                let seed = derive_seed(cfg.healthy_seed, &[label_hash(&r.image_id), g.expansion_factor() as u64]);
                pool.extend(sample_healthy_patches(r, cfg.healthy_per_image, seed, &sampling)?);
            }
        }
    }
    Ok(pool)
}

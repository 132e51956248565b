//! On-disk formats: dataset manifest, patch cache and split files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    BiopsyLabel, ClassLabel, LesionPatch, MammogramRecord, Modality, Partition, Provenance,
    SplitAssignment, ZoomGroup,
};
use crate::error::{Error, IoContext, Result};
use crate::imageops::{load_png, save_png16, save_png8};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const PATCH_INDEX_FILE: &str = "index.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    image_id: String,
    patient_id: String,
    modality: Modality,
    label: BiopsyLabel,
    image_path: String,
    mask_path: String,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Loads every record listed in a manifest; relative paths resolve against
/// the manifest's directory. An empty `mask_path` means no annotation.
pub fn read_manifest(path: &Path) -> Result<Vec<MammogramRecord>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let pixels = load_png(&resolve(base, &row.image_path))?;
        let lesion_mask = if row.mask_path.trim().is_empty() {
            None
        } else {
            Some(load_png(&resolve(base, &row.mask_path))?.mapv(|v| v > 0.5))
        };
        records.push(MammogramRecord::new(
            row.image_id,
            row.patient_id,
            row.modality,
            pixels,
            lesion_mask,
            row.label,
        )?);
    }
    Ok(records)
}

/// One message per manifest row that cannot be loaded (unparseable row or
/// missing image/mask file), without decoding any image.
pub fn manifest_problems(path: &Path) -> Result<Vec<String>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path)?;
    let mut problems = Vec::new();
    for (k, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = k + 2;
        match row {
            Err(e) => problems.push(format!("row {line}: {e}")),
            Ok(row) => {
                let mut files = vec![&row.image_path];
                if !row.mask_path.trim().is_empty() {
                    files.push(&row.mask_path);
                }
                for f in files {
                    let p = resolve(base, f);
                    if !p.is_file() {
                        problems.push(format!("row {line} ({}): missing file {}", row.image_id, p.display()));
                    }
                }
            }
        }
    }
    Ok(problems)
}

/// Writes images, masks and a manifest under `dir`; returns the manifest path.
pub fn write_dataset(records: &[MammogramRecord], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).at(dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut writer = csv::Writer::from_path(&manifest)?;
    for r in records {
        let image_path = format!("images/{}.png", r.image_id);
        save_png16(&r.pixels, &dir.join(&image_path))?;
        let mask_path = match &r.lesion_mask {
            Some(mask) => {
                let rel = format!("masks/{}.png", r.image_id);
                save_png8(&mask.mapv(|v| if v { 1.0 } else { 0.0 }), &dir.join(&rel))?;
                rel
            }
            None => String::new(),
        };
        writer.serialize(ManifestRow {
            image_id: r.image_id.clone(),
            patient_id: r.patient_id.clone(),
            modality: r.modality,
            label: r.biopsy_label,
            image_path,
            mask_path,
        })?;
    }
    writer.flush().at(&manifest)?;
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchRow {
    patch_id: String,
    image_id: String,
    patient_id: String,
    zoom_group: String,
    label: ClassLabel,
    provenance: String,
}

fn patch_file(dir: &Path, patch_id: &str) -> PathBuf {
    dir.join("patches").join(format!("{patch_id}.png"))
}

/// Writes patches as 16-bit PNGs plus an index CSV.
pub fn write_patch_cache(patches: &[LesionPatch], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let index = dir.join(PATCH_INDEX_FILE);
    let mut writer = csv::Writer::from_path(&index)?;
    for p in patches {
        save_png16(&p.pixels, &patch_file(dir, &p.patch_id))?;
        writer.serialize(PatchRow {
            patch_id: p.patch_id.clone(),
            image_id: p.source_image_id.clone(),
            patient_id: p.patient_id.clone(),
            zoom_group: p.zoom_group.to_string(),
            label: p.class_label,
            provenance: p.provenance.to_string(),
        })?;
    }
    writer.flush().at(&index)?;
    Ok(())
}

pub fn read_patch_cache(dir: &Path) -> Result<Vec<LesionPatch>> {
    let mut reader = csv::Reader::from_path(dir.join(PATCH_INDEX_FILE))?;
    let mut patches = Vec::new();
    for row in reader.deserialize() {
        let row: PatchRow = row?;
        let patch = LesionPatch {
            pixels: load_png(&patch_file(dir, &row.patch_id))?,
            zoom_group: row.zoom_group.parse()?,
            class_label: row.label,
            source_image_id: row.image_id,
            patient_id: row.patient_id,
            provenance: row.provenance.parse::<Provenance>()?,
            patch_id: row.patch_id,
        };
        patch.validate()?;
        patches.push(patch);
    }
    Ok(patches)
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct FoldFile {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

pub fn write_splits(folds: &[SplitAssignment], path: &Path) -> Result<()> {
    let mut out: BTreeMap<String, FoldFile> = BTreeMap::new();
    for f in folds {
        let entry = out.entry(f.fold_id.to_string()).or_default();
        for (pid, part) in &f.assignment {
            match part {
                Partition::Train => entry.train.push(pid.clone()),
                Partition::Val => entry.val.push(pid.clone()),
                Partition::Test => entry.test.push(pid.clone()),
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(&out)?).at(path)
}

pub fn read_splits(path: &Path) -> Result<Vec<SplitAssignment>> {
    let text = fs::read_to_string(path).at(path)?;
    let raw: BTreeMap<String, FoldFile> = serde_json::from_str(&text)?;
    let mut folds = Vec::new();
    for (key, f) in raw {
        let fold_id: usize = key
            .parse()
            .map_err(|_| Error::Config(format!("fold id {key:?} is not an integer")))?;
        let mut assignment = BTreeMap::new();
        for (ids, part) in [(f.train, Partition::Train), (f.val, Partition::Val), (f.test, Partition::Test)] {
            for id in ids {
                if assignment.insert(id.clone(), part).is_some() {
                    return Err(Error::Config(format!(
                        "patient {id} appears in more than one partition of fold {fold_id}"
                    )));
                }
            }
        }
        folds.push(SplitAssignment { fold_id, assignment });
    }
    folds.sort_by_key(|f| f.fold_id);
    Ok(folds)
}

/// Parses a zoom group list such as `"G1,G3"`.
pub fn parse_groups(s: &str) -> Result<Vec<ZoomGroup>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect()
}

//! Grid specification: shared data/split/model settings plus a list of cells.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::CropConfig;
use crate::classifier::{BackboneSpec, TrainConfig};
use crate::dataset::{PhantomConfig, SplitFractions, SplitMode, ZoomGroup};
use crate::error::{Error, IoContext, Result};
use crate::singan::SinGANConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Augmentation {
    None,
    /// Malignant samples from `n_models` SinGANs, each trained on one G1 patch.
    Singan {
        n_models: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        source_image_ids: Vec<String>,
    },
    /// Duplicates of `n_images` real malignant G1 patches.
    Oversample {
        n_images: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        image_ids: Vec<String>,
    },
    /// Ensemble of SinGAN-augmented and oversampled models on the same sources.
    Combined {
        n_models: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        source_image_ids: Vec<String>,
    },
}

impl Augmentation {
    pub fn label(&self) -> String {
        match self {
            Augmentation::None => "none".into(),
            Augmentation::Singan { n_models, .. } => format!("singan-{n_models}"),
            Augmentation::Oversample { n_images, .. } => format!("oversample-{n_images}"),
            Augmentation::Combined { n_models, .. } => format!("singan+oversample-{n_models}"),
        }
    }

    /// Number of G1 source patches the regime needs.
    pub fn n_sources(&self) -> usize {
        match self {
            Augmentation::None => 0,
            Augmentation::Singan { n_models, .. } | Augmentation::Combined { n_models, .. } => *n_models,
            Augmentation::Oversample { n_images, .. } => *n_images,
        }
    }

    pub fn explicit_sources(&self) -> &[String] {
        match self {
            Augmentation::None => &[],
            Augmentation::Singan { source_image_ids, .. } | Augmentation::Combined { source_image_ids, .. } => source_image_ids,
            Augmentation::Oversample { image_ids, .. } => image_ids,
        }
    }

    pub fn uses_singan(&self) -> bool {
        matches!(self, Augmentation::Singan { .. } | Augmentation::Combined { .. })
    }

    /// A zero-source SinGAN or oversampling regime is the plain baseline.
    fn normalized(self) -> Self {
        if self.n_sources() == 0 {
            Augmentation::None
        } else {
            self
        }
    }
}

/// One fully resolved cell of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub train_groups: Vec<ZoomGroup>,
    pub test_groups: Vec<ZoomGroup>,
    pub augmentation: Augmentation,
    /// Synthetic or duplicated patches restore benign/malignant balance.
    pub target_balance: bool,
    /// Fixed number of added patches when `target_balance` is off.
    pub synthetic_total: Option<usize>,
    /// Evaluate the mean of the per-fold models on the shared test set.
    pub ensemble: bool,
    pub crop_probe: bool,
    pub crop: CropConfig,
    pub split_mode: SplitMode,
    pub seeds: Vec<u64>,
    pub train_config: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("cell {}: {m}", self.name)));
        if self.train_groups.is_empty() || self.test_groups.is_empty() {
            return bad("train and test groups must be nonempty".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let Augmentation::Combined { .. } = self.augmentation {
            if !self.ensemble {
                return bad("the combined regime is only defined as an ensemble".into());
            }
        }
        if self.ensemble && self.split_mode != SplitMode::FixedTest {
            return bad("ensembles need a fixed test set (split_mode = \"fixed_test\")".into());
        }
        let explicit = self.augmentation.explicit_sources();
        if !explicit.is_empty() && explicit.len() != self.augmentation.n_sources() {
            return bad(format!("{} source ids given for {} sources", explicit.len(), self.augmentation.n_sources()));
        }
        if self.augmentation != Augmentation::None && !self.target_balance && self.synthetic_total.is_none() {
            return bad("synthetic_total is required when target_balance is off".into());
        }
        self.crop.validate()?;
        self.train_config.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Phantom {
        n_patients: usize,
        prevalence: f64,
        seed: u64,
        #[serde(default)]
        phantom: PhantomConfig,
    },
    /// Manifest CSV as written by the dataset I/O helpers.
    Manifest { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Healthy patches drawn per normal image and zoom group.
    pub healthy_per_image: usize,
    pub healthy_threshold: f32,
    pub healthy_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Phantom {
                n_patients: 200,
                prevalence: 0.5,
                seed: 11,
                phantom: PhantomConfig::default(),
            },
            healthy_per_image: 2,
            healthy_threshold: 0.1,
            healthy_seed: 0,
        }
    }
}

/// Settings shared by every cell unless the cell overrides them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellDefaults {
    pub target_balance: bool,
    pub crop: CropConfig,
    pub split_mode: SplitMode,
    pub seeds: Vec<u64>,
    pub train_config: TrainConfig,
}

impl Default for CellDefaults {
    fn default() -> Self {
        CellDefaults {
            target_balance: true,
            crop: CropConfig::default(),
            split_mode: SplitMode::RotatingTest,
            seeds: vec![0],
            train_config: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    pub train_groups: Vec<ZoomGroup>,
    pub test_groups: Vec<ZoomGroup>,
    #[serde(default = "no_augmentation")]
    pub augmentation: Augmentation,
    #[serde(default)]
    pub ensemble: bool,
    #[serde(default)]
    pub crop_probe: bool,
    pub target_balance: Option<bool>,
    pub synthetic_total: Option<usize>,
    pub split_mode: Option<SplitMode>,
    pub seeds: Option<Vec<u64>>,
    pub train_config: Option<TrainConfig>,
}

fn no_augmentation() -> Augmentation {
    Augmentation::None
}

impl CellSpec {
    pub fn new(name: impl Into<String>, train_groups: &[ZoomGroup], test_groups: &[ZoomGroup]) -> Self {
        CellSpec {
            name: name.into(),
            train_groups: train_groups.to_vec(),
            test_groups: test_groups.to_vec(),
            augmentation: Augmentation::None,
            ensemble: false,
            crop_probe: false,
            target_balance: None,
            synthetic_total: None,
            split_mode: None,
            seeds: None,
            train_config: None,
        }
    }

    pub fn resolve(&self, d: &CellDefaults) -> ExperimentConfig {
        let mut train_groups = self.train_groups.clone();
        let mut test_groups = self.test_groups.clone();
        for g in [&mut train_groups, &mut test_groups] {
            g.sort();
            g.dedup();
        }
        ExperimentConfig {
            name: self.name.clone(),
            train_groups,
            test_groups,
            augmentation: self.augmentation.clone().normalized(),
            target_balance: self.target_balance.unwrap_or(d.target_balance),
            synthetic_total: self.synthetic_total,
            ensemble: self.ensemble,
            crop_probe: self.crop_probe,
            crop: d.crop,
            split_mode: self.split_mode.unwrap_or(d.split_mode),
            seeds: self.seeds.clone().unwrap_or_else(|| d.seeds.clone()),
            train_config: self.train_config.clone().unwrap_or_else(|| d.train_config.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub name: String,
    pub data: DataConfig,
    pub n_folds: usize,
    pub split_fractions: SplitFractions,
    pub split_seed: u64,
    /// Seed for the random choice of SinGAN / oversampling source patches.
    pub selection_seed: u64,
    pub backbone: BackboneSpec,
    pub singan: SinGANConfig,
    pub defaults: CellDefaults,
    pub cells: Vec<CellSpec>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            name: "grid".into(),
            data: DataConfig::default(),
            n_folds: 3,
            split_fractions: SplitFractions::default(),
            split_seed: 0,
            selection_seed: 0,
            backbone: BackboneSpec::default(),
            singan: SinGANConfig {
                max_dim: 40,
                ..SinGANConfig::default()
            },
            defaults: CellDefaults::default(),
            cells: Vec::new(),
        }
    }
}

impl GridConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let grid: GridConfig = toml::from_str(text)?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut grid = Self::from_toml_str(&text)?;
        // manifest paths are relative to the config file
        if let DataSource::Manifest { path: p } = &mut grid.data.source {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(grid)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize grid: {e}")))
    }

    pub fn resolved_cells(&self) -> Vec<ExperimentConfig> {
        self.cells.iter().map(|c| c.resolve(&self.defaults)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(Error::Config("n_folds must be positive".into()));
        }
        self.split_fractions.validate()?;
        self.singan.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for cell in self.resolved_cells() {
            if !names.insert(cell.name.clone()) {
                return Err(Error::Config(format!("duplicate cell name {}", cell.name)));
            }
            cell.validate()?;
        }
        Ok(())
    }

    /// Hash of everything that determines the outcome of `cell`.
    pub fn fingerprint(&self, cell: &ExperimentConfig) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            cell: &'a ExperimentConfig,
            data: &'a DataConfig,
            n_folds: usize,
            split_fractions: &'a SplitFractions,
            split_seed: u64,
            selection_seed: Option<u64>,
            backbone: &'a BackboneSpec,
            singan: Option<&'a SinGANConfig>,
        }
        let augmented = cell.augmentation != Augmentation::None;
        let key = Key {
            cell,
            data: &self.data,
            n_folds: self.n_folds,
            split_fractions: &self.split_fractions,
            split_seed: self.split_seed,
            selection_seed: augmented.then_some(self.selection_seed),
            backbone: &self.backbone,
            singan: cell.augmentation.uses_singan().then_some(&self.singan),
        };
        let json = serde_json::to_vec(&key).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }
}

/// The annotation-shift cells: each group and all groups tested on all
/// groups, plus the seven single-group train/test pairs.
pub fn shift_grid_cells() -> Vec<CellSpec> {
    use ZoomGroup::*;
    let all = [G1, G2, G3];
    let mut cells = vec![CellSpec::new("all->all", &all, &all)];
    for g in all {
        cells.push(CellSpec::new(format!("{g}->all"), &[g], &all));
    }
    for (tr, te) in [(G1, G1), (G2, G2), (G3, G3), (G3, G1), (G2, G1), (G1, G3), (G2, G3)] {
        cells.push(CellSpec::new(format!("{tr}->{te}"), &[tr], &[te]));
    }
    cells
}

/// Training on G3, testing on G1, with synthetic malignant patches from
/// `n` SinGANs for each `n` in `n_models` (0 is the plain baseline).
pub fn augmentation_study_cells(n_models: &[usize]) -> Vec<CellSpec> {
    n_models
        .iter()
        .map(|&n| {
            let mut cell = CellSpec::new(format!("G3->G1 singan-{n}"), &[ZoomGroup::G3], &[ZoomGroup::G1]);
            cell.augmentation = Augmentation::Singan {
                n_models: n,
                source_image_ids: Vec::new(),
            };
            cell
        })
        .collect()
}

/// The augmentation comparison: baseline, SinGAN, oversampling and their
/// combination as fixed-test ensembles, tested on G1 and G3 with and without
/// the crop probe.
pub fn comparison_cells(n_sources: usize) -> Vec<CellSpec> {
    let regimes = [
        Augmentation::None,
        Augmentation::Singan {
            n_models: n_sources,
            source_image_ids: Vec::new(),
        },
        Augmentation::Oversample {
            n_images: n_sources,
            image_ids: Vec::new(),
        },
        Augmentation::Combined {
            n_models: n_sources,
            source_image_ids: Vec::new(),
        },
    ];
    let mut cells = Vec::new();
    for test in [ZoomGroup::G1, ZoomGroup::G3] {
        for crop in [false, true] {
            for aug in &regimes {
                let tag = if crop { " crop" } else { "" };
                let mut cell = CellSpec::new(format!("G3->{test} {}{tag}", aug.label()), &[ZoomGroup::G3], &[test]);
                cell.augmentation = aug.clone();
                cell.ensemble = true;
                cell.crop_probe = crop;
                cell.split_mode = Some(SplitMode::FixedTest);
                cells.push(cell);
            }
        }
    }
    cells
}

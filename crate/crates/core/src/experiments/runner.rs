//! Executes grid cells: per-fold head training on cached backbone features,
//! optional augmentation, evaluation and report writing with resume.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex, OnceLock};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::{generate_synthetic, label_deficit, random_resized_crop, split_counts, SyntheticSource};
use super::config::{Augmentation, CellSpec, ExperimentConfig, GridConfig};
use super::ensemble::mean_scores;
use super::plot::write_auc_plots;
use super::pool::{build_patch_pool, load_records};
use crate::classifier::{
    argmax, class_names, train_head, Backbone, FeatureSet, LinearHead, FEATURE_DIM,
};
use crate::dataset::{
    make_splits, weighted_sampler_weights, ClassLabel, LesionPatch, MammogramRecord, Partition, SplitAssignment,
    SplitMode, ZoomGroup,
};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{accuracy, roc_auc_ovr, write_results_csv, FoldMetrics, MetricsReport};
use crate::seeding::{derive_seed, label_hash, rng_for};
use crate::singan::{load_model, save_model, train_singan, SinGANModel};

/// Training regime of one member model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Regime {
    Baseline,
    Singan,
    Oversample,
}

impl Regime {
    fn tag(self) -> u64 {
        match self {
            Regime::Baseline => 0,
            Regime::Singan => 1,
            Regime::Oversample => 2,
        }
    }

    fn of(aug: &Augmentation) -> Vec<Regime> {
        match aug {
            Augmentation::None => vec![Regime::Baseline],
            Augmentation::Singan { .. } => vec![Regime::Singan],
            Augmentation::Oversample { .. } => vec![Regime::Oversample],
            Augmentation::Combined { .. } => vec![Regime::Singan, Regime::Oversample],
        }
    }
}

type SinganSlot = Arc<Mutex<Option<Arc<SinGANModel>>>>;

/// Data, splits, backbone and caches shared by all cells of a grid.
pub struct ExperimentContext {
    pub grid: GridConfig,
    pub records: Vec<MammogramRecord>,
    pub pool: Vec<LesionPatch>,
    pub backbone: Arc<dyn Backbone>,
    /// Directory for trained SinGAN checkpoints, reused across runs.
    pub singan_cache: Option<PathBuf>,
    features: Vec<OnceLock<Vec<f32>>>,
    extra_features: Mutex<HashMap<String, Arc<Vec<f32>>>>,
    splits: Mutex<HashMap<SplitMode, Arc<Vec<SplitAssignment>>>>,
    singans: Mutex<HashMap<String, SinganSlot>>,
}

impl std::fmt::Debug for ExperimentContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExperimentContext")
            .field("grid", &self.grid.name)
            .field("records", &self.records.len())
            .field("pool", &self.pool.len())
            .field("backbone", &self.backbone.identifier())
            .finish()
    }
}

impl ExperimentContext {
    /// Loads the grid's data source and backbone.
    pub fn new(grid: GridConfig) -> Result<Self> {
        grid.validate()?;
        let records = load_records(&grid.data)?;
        let backbone = grid.backbone.load()?;
        Self::with_records(grid, records, backbone)
    }

    pub fn with_records(grid: GridConfig, records: Vec<MammogramRecord>, backbone: Arc<dyn Backbone>) -> Result<Self> {
        let pool = build_patch_pool(&records, &grid.data)?;
        Ok(ExperimentContext {
            features: (0..pool.len()).map(|_| OnceLock::new()).collect(),
            grid,
            records,
            pool,
            backbone,
            singan_cache: None,
            extra_features: Mutex::new(HashMap::new()),
            splits: Mutex::new(HashMap::new()),
            singans: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_singan_cache(mut self, dir: Option<PathBuf>) -> Self {
        self.singan_cache = dir;
        self
    }

    pub fn splits(&self, mode: SplitMode) -> Result<Arc<Vec<SplitAssignment>>> {
        let mut map = self.splits.lock().expect("split cache poisoned");
        if let Some(s) = map.get(&mode) {
            return Ok(s.clone());
        }
        let g = &self.grid;
        let s = Arc::new(make_splits(&self.records, g.n_folds, g.split_fractions, mode, g.split_seed)?);
        map.insert(mode, s.clone());
        Ok(s)
    }

    fn pool_features(&self, idx: usize) -> Result<&[f32]> {
        if let Some(f) = self.features[idx].get() {
            return Ok(f);
        }
        let f = self.backbone.features(&self.pool[idx].pixels)?;
        Ok(self.features[idx].get_or_init(|| f))
    }

    fn keyed_features(&self, key: &str, patch: &LesionPatch) -> Result<Arc<Vec<f32>>> {
        if let Some(f) = self.extra_features.lock().expect("feature cache poisoned").get(key) {
            return Ok(f.clone());
        }
        let f = Arc::new(self.backbone.features(&patch.pixels)?);
        self.extra_features
            .lock()
            .expect("feature cache poisoned")
            .insert(key.to_string(), f.clone());
        Ok(f)
    }

    /// Pool indices in `groups` whose patient falls into `part`.
    pub fn indices(&self, split: &SplitAssignment, part: Partition, groups: &[ZoomGroup]) -> Vec<usize> {
        (0..self.pool.len())
            .filter(|&i| {
                let p = &self.pool[i];
                groups.contains(&p.zoom_group) && split.partition_of(&p.patient_id) == Some(part)
            })
            .collect()
    }

    /// Real malignant G1 patches used as SinGAN or oversampling sources in `fold`.
    ///
    /// Random selection shuffles all candidates with the grid's selection seed
    /// and prefers patients that are in training in the most folds, so the
    /// same sources serve every fold whenever the split allows it. Smaller
    /// counts take a prefix of the same ranking.
    pub fn source_patches(&self, aug: &Augmentation, splits: &[SplitAssignment], fold: usize) -> Result<Vec<usize>> {
        let n = aug.n_sources();
        let split = &splits[fold];
        let is_source = |p: &LesionPatch| {
            p.zoom_group == ZoomGroup::G1 && p.class_label == ClassLabel::Malignant && p.provenance.is_real()
        };
        let explicit = aug.explicit_sources();
        if !explicit.is_empty() {
            return explicit
                .iter()
                .map(|id| {
                    let idx = (0..self.pool.len())
                        .find(|&i| is_source(&self.pool[i]) && self.pool[i].source_image_id == *id)
                        .ok_or_else(|| Error::Config(format!("image {id} has no malignant lesion patch")))?;
                    if split.partition_of(&self.pool[idx].patient_id) != Some(Partition::Train) {
                        return Err(Error::Config(format!(
                            "source image {id} belongs to a patient outside the training partition of fold {fold}"
                        )));
                    }
                    Ok(idx)
                })
                .collect();
        }
        let mut candidates: Vec<usize> = (0..self.pool.len()).filter(|&i| is_source(&self.pool[i])).collect();
        candidates.shuffle(&mut rng_for(self.grid.selection_seed, &[0x5e1ec7]));
        let train_folds = |i: usize| {
            splits
                .iter()
                .filter(|s| s.partition_of(&self.pool[i].patient_id) == Some(Partition::Train))
                .count()
        };
        candidates.sort_by_key(|&i| std::cmp::Reverse(train_folds(i)));
        let chosen: Vec<usize> = candidates
            .into_iter()
            .filter(|&i| split.partition_of(&self.pool[i].patient_id) == Some(Partition::Train))
            .take(n)
            .collect();
        if chosen.len() < n {
            return Err(Error::Config(format!(
                "fold {fold} has {} malignant G1 training patches, {n} needed",
                chosen.len()
            )));
        }
        Ok(chosen)
    }

    fn singan_key(&self, idx: usize) -> String {
        let cfg = serde_json::to_vec(&self.grid.singan).expect("config serializes");
        let h = hex::encode(Sha256::digest(cfg));
        format!("{}_{}", self.pool[idx].source_image_id, &h[..12])
    }

    /// SinGAN trained on pool patch `idx`, from memory, disk cache, or trained now.
    pub fn singan_for(&self, idx: usize) -> Result<Arc<SinGANModel>> {
        let key = self.singan_key(idx);
        let slot = self
            .singans
            .lock()
            .expect("singan cache poisoned")
            .entry(key.clone())
            .or_default()
            .clone();
        let mut guard = slot.lock().expect("singan slot poisoned");
        if let Some(m) = guard.as_ref() {
            return Ok(m.clone());
        }
        let dir = self.singan_cache.as_ref().map(|d| d.join(&key));
        let model = match dir.as_ref().filter(|d| d.join("metadata.json").is_file()) {
            Some(d) => load_model(d)?,
            None => {
                let patch = &self.pool[idx];
                let mut cfg = self.grid.singan.clone();
                cfg.seed = derive_seed(cfg.seed, &[label_hash(&patch.source_image_id)]);
                log::info!("training SinGAN on {}", patch.patch_id);
                let trained = train_singan(&patch.pixels, &patch.source_image_id, &cfg)?;
                if let Some(d) = &dir {
                    save_model(&trained.model, d)?;
                }
                trained.model
            }
        };
        let model = Arc::new(model);
        *guard = Some(model.clone());
        Ok(model)
    }

    /// Head trained for one fold under one regime.
    fn train_member(
        &self,
        cell: &ExperimentConfig,
        regime: Regime,
        splits: &[SplitAssignment],
        fold: usize,
        seed: u64,
    ) -> Result<LinearHead> {
        let split = &splits[fold];
        let train_idx = self.indices(split, Partition::Train, &cell.train_groups);
        let val_idx = self.indices(split, Partition::Val, &cell.train_groups);
        let mut feats: Vec<Arc<Vec<f32>>> = Vec::new();
        let mut train_f: Vec<&[f32]> = Vec::new();
        let mut train_y: Vec<usize> = Vec::new();
        for &i in &train_idx {
            train_f.push(self.pool_features(i)?);
            train_y.push(self.pool[i].class_label.index());
        }
        let deficit = if cell.target_balance {
            label_deficit(train_idx.iter().map(|&i| self.pool[i].class_label), ClassLabel::Malignant)
        } else {
            cell.synthetic_total.unwrap_or(0)
        };
        match regime {
            Regime::Baseline => {}
            Regime::Singan => {
                let sources = self.source_patches(&cell.augmentation, splits, fold)?;
                let models = sources.iter().map(|&i| self.singan_for(i)).collect::<Result<Vec<_>>>()?;
                let ids: Vec<String> = sources.iter().map(|&i| self.singan_key(i)).collect();
                let synth_sources: Vec<SyntheticSource<'_>> = sources
                    .iter()
                    .zip(&models)
                    .zip(&ids)
                    .map(|((&i, m), id)| SyntheticSource {
                        model_id: id,
                        patient_id: &self.pool[i].patient_id,
                        model: m,
                    })
                    .collect();
                let synth = generate_synthetic(&synth_sources, ClassLabel::Malignant, deficit, derive_seed(seed, &[fold as u64, 0x5e]))?;
                for p in &synth {
                    feats.push(self.keyed_features(&p.patch_id, p)?);
                }
            }
            Regime::Oversample => {
                let sources = self.source_patches(&cell.augmentation, splits, fold)?;
                for (&i, count) in sources.iter().zip(split_counts(deficit, sources.len())) {
                    let f = self.pool_features(i)?;
                    for _ in 0..count {
                        train_f.push(f);
                        train_y.push(ClassLabel::Malignant.index());
                    }
                }
            }
        }
        for f in &feats {
            train_f.push(f.as_slice());
            train_y.push(ClassLabel::Malignant.index());
        }
        let mut val_f: Vec<&[f32]> = Vec::with_capacity(val_idx.len());
        for &i in &val_idx {
            val_f.push(self.pool_features(i)?);
        }
        let val_y: Vec<usize> = val_idx.iter().map(|&i| self.pool[i].class_label.index()).collect();
        let train_w = match regime {
            Regime::Baseline => Some(weighted_sampler_weights(&train_y, 3)?),
            _ => None,
        };
        let val_w = weighted_sampler_weights(&val_y, 3)?;
        let tag = regime.tag();
        let head = LinearHead::new(3, FEATURE_DIM, derive_seed(seed, &[fold as u64, tag]));
        let (head, _) = train_head(
            &head,
            FeatureSet {
                features: &train_f,
                labels: &train_y,
                weights: train_w.as_deref(),
            },
            FeatureSet {
                features: &val_f,
                labels: &val_y,
                weights: Some(&val_w),
            },
            &cell.train_config,
            derive_seed(seed, &[fold as u64, tag, 1]),
        )?;
        Ok(head)
    }

    /// Test features, passed through the crop probe when the cell asks for it.
    fn test_features(&self, cell: &ExperimentConfig, test_idx: &[usize], seed: u64) -> Result<Vec<Arc<Vec<f32>>>> {
        test_idx
            .iter()
            .map(|&i| {
                if cell.crop_probe {
                    let p = &self.pool[i];
                    let crop_seed = derive_seed(seed, &[label_hash(&p.patch_id)]);
                    let key = format!("crop:{crop_seed:016x}:{:?}:{}", cell.crop, p.patch_id);
                    let cropped = random_resized_crop(p, &cell.crop, crop_seed)?;
                    self.keyed_features(&key, &cropped)
                } else {
                    Ok(Arc::new(self.pool_features(i)?.to_vec()))
                }
            })
            .collect()
    }

    fn evaluate(&self, fold: usize, seed: u64, scores: &[Vec<f64>], test_idx: &[usize]) -> Result<FoldMetrics> {
        let labels: Vec<usize> = test_idx.iter().map(|&i| self.pool[i].class_label.index()).collect();
        let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        Ok(FoldMetrics {
            fold,
            seed,
            accuracy: accuracy(&predicted, &labels)?,
            auc: roc_auc_ovr(scores, &labels, &class_names(3)?)?,
        })
    }

    /// Runs every seed and fold of one cell.
    pub fn run_cell(&self, cell: &ExperimentConfig) -> Result<MetricsReport> {
        cell.validate()?;
        let splits = self.splits(cell.split_mode)?;
        let regimes = Regime::of(&cell.augmentation);
        let mut folds = Vec::new();
        for (si, &seed) in cell.seeds.iter().enumerate() {
            if cell.ensemble {
                let test_idx = self.indices(&splits[0], Partition::Test, &cell.test_groups);
                if splits.iter().any(|s| self.indices(s, Partition::Test, &cell.test_groups) != test_idx) {
                    return Err(Error::Config("ensemble folds do not share a test set".into()));
                }
                let test_f = self.test_features(cell, &test_idx, seed)?;
                let mut member_scores = Vec::new();
                for fold in 0..splits.len() {
                    for &regime in &regimes {
                        let head = self.train_member(cell, regime, &splits, fold, seed)?;
                        member_scores.push(test_f.iter().map(|f| head.scores(f)).collect::<Vec<_>>());
                    }
                }
                folds.push(self.evaluate(si, seed, &mean_scores(&member_scores)?, &test_idx)?);
            } else {
                for fold in 0..splits.len() {
                    let test_idx = self.indices(&splits[fold], Partition::Test, &cell.test_groups);
                    let test_f = self.test_features(cell, &test_idx, seed)?;
                    let head = self.train_member(cell, regimes[0], &splits, fold, seed)?;
                    let scores: Vec<Vec<f64>> = test_f.iter().map(|f| head.scores(f)).collect();
                    folds.push(self.evaluate(si * splits.len() + fold, seed, &scores, &test_idx)?);
                }
            }
        }
        let mut report = MetricsReport::from_folds(
            cell.name.clone(),
            cell.train_groups.clone(),
            cell.test_groups.clone(),
            cell.augmentation.label(),
            folds,
            self.grid.fingerprint(cell),
            self.backbone.identifier(),
        )?;
        if cell.crop_probe {
            report.notes.push(format!("crop probe: scale {:?}, ratio {:?}", cell.crop.scale, cell.crop.ratio));
        }
        if cell.ensemble {
            report.notes.push(format!("ensemble of {} members per seed", splits.len() * regimes.len()));
        }
        Ok(report)
    }

    /// Sources needed by `cells`, deduplicated, in first-use order.
    fn singan_sources(&self, cells: &[ExperimentConfig]) -> Result<Vec<usize>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for cell in cells.iter().filter(|c| c.augmentation.uses_singan()) {
            let splits = self.splits(cell.split_mode)?;
            for fold in 0..splits.len() {
                for i in self.source_patches(&cell.augmentation, &splits, fold)? {
                    if seen.insert(i) {
                        out.push(i);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub name: String,
    pub fingerprint: String,
    pub resumed: bool,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: usize,
    /// Reports, results table and plots are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many newly computed cells.
    pub max_new_cells: Option<usize>,
}

pub const CELLS_DIR: &str = "cells";
pub const RESULTS_FILE: &str = "results.csv";

fn cell_path(out: &Path, fingerprint: &str) -> PathBuf {
    out.join(CELLS_DIR).join(format!("{fingerprint}.json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

/// Runs `jobs` on up to `workers` threads; results arrive on the calling
/// thread in completion order.
fn parallel<T: Send, F>(jobs: usize, workers: usize, work: F, mut sink: impl FnMut(usize, T))
where
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.max(1)) {
            let tx = tx.clone();
            let (next, work) = (&next, &work);
            scope.spawn(move || loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= jobs || tx.send((j, work(j))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (j, r) in rx {
            sink(j, r);
        }
    });
}

/// Runs all cells of the context's grid, skipping cells whose report already
/// exists in the output directory.
pub fn run_grid(ctx: &ExperimentContext, opts: &RunOptions) -> Result<Vec<CellOutcome>> {
    run_cells(ctx, &ctx.grid.resolved_cells(), opts)
}

pub fn run_cells(ctx: &ExperimentContext, cells: &[ExperimentConfig], opts: &RunOptions) -> Result<Vec<CellOutcome>> {
    let mut outcomes: Vec<Option<CellOutcome>> = vec![None; cells.len()];
    if let Some(out) = &opts.out_dir {
        std::fs::create_dir_all(out.join(CELLS_DIR)).at(out)?;
    }
    let mut pending = Vec::new();
    for (k, cell) in cells.iter().enumerate() {
        let fingerprint = ctx.grid.fingerprint(cell);
        let existing = opts
            .out_dir
            .as_ref()
            .map(|o| cell_path(o, &fingerprint))
            .filter(|p| p.is_file())
            .and_then(|p| std::fs::read(p).ok())
            .and_then(|b| serde_json::from_slice::<MetricsReport>(&b).ok());
        match existing {
            Some(report) => {
                outcomes[k] = Some(CellOutcome {
                    name: cell.name.clone(),
                    fingerprint,
                    resumed: true,
                    report: Some(report),
                    error: None,
                })
            }
            None => pending.push(k),
        }
    }
    if let Some(limit) = opts.max_new_cells {
        pending.truncate(limit);
    }
    let todo: Vec<ExperimentConfig> = pending.iter().map(|&k| cells[k].clone()).collect();
    // SinGANs are trained up front so concurrent cells never duplicate work
    let sources = ctx.singan_sources(&todo)?;
    let mut singan_errors = Vec::new();
    parallel(sources.len(), opts.workers, |j| ctx.singan_for(sources[j]).map(|_| ()), |j, r| {
        if let Err(e) = r {
            singan_errors.push(format!("{}: {e}", ctx.pool[sources[j]].patch_id));
        }
    });
    if !singan_errors.is_empty() {
        log::error!("SinGAN training failed: {}", singan_errors.join("; "));
    }
    let mut write_error = None;
    parallel(
        todo.len(),
        opts.workers,
        |j| ctx.run_cell(&todo[j]),
        |j, result| {
            let cell = &todo[j];
            let fingerprint = ctx.grid.fingerprint(cell);
            let outcome = match result {
                Ok(report) => {
                    if let Some(out) = &opts.out_dir {
                        let bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
                        if let Err(e) = write_atomic(&cell_path(out, &fingerprint), &bytes) {
                            write_error.get_or_insert(e);
                        }
                    }
                    log::info!("cell {} done", cell.name);
                    CellOutcome {
                        name: cell.name.clone(),
                        fingerprint,
                        resumed: false,
                        report: Some(report),
                        error: None,
                    }
                }
                Err(e) => {
                    log::error!("cell {} failed: {e}", cell.name);
                    CellOutcome {
                        name: cell.name.clone(),
                        fingerprint,
                        resumed: false,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            outcomes[pending[j]] = Some(outcome);
        },
    );
    if let Some(e) = write_error {
        return Err(e);
    }
    let outcomes: Vec<CellOutcome> = outcomes.into_iter().flatten().collect();
    if let Some(out) = &opts.out_dir {
        let reports: Vec<MetricsReport> = outcomes.iter().filter_map(|o| o.report.clone()).collect();
        write_results_csv(&reports, &out.join(RESULTS_FILE))?;
        write_auc_plots(&reports, out)?;
        let failures: BTreeMap<&str, &str> = outcomes
            .iter()
            .filter_map(|o| o.error.as_deref().map(|e| (o.name.as_str(), e)))
            .collect();
        write_atomic(&out.join("failures.json"), &serde_json::to_vec_pretty(&failures)?)?;
    }
    Ok(outcomes)
}

fn reports_or_error(outcomes: Vec<CellOutcome>) -> Result<Vec<MetricsReport>> {
    outcomes
        .into_iter()
        .map(|o| match (o.report, o.error) {
            (Some(r), _) => Ok(r),
            (None, e) => Err(Error::Cell {
                cell: o.name,
                source: Box::new(Error::Config(e.unwrap_or_else(|| "not run".into()))),
            }),
        })
        .collect()
}

/// Runs annotation-shift cells with the grid's defaults.
pub fn run_shift_grid(ctx: &ExperimentContext, cells: &[CellSpec], workers: usize) -> Result<Vec<MetricsReport>> {
    let resolved: Vec<ExperimentConfig> = cells.iter().map(|c| c.resolve(&ctx.grid.defaults)).collect();
    reports_or_error(run_cells(ctx, &resolved, &RunOptions { workers, ..Default::default() })?)
}

/// Train-on-G3, test-on-G1 cells with synthetic data from each number of SinGANs.
pub fn run_augmentation_study(ctx: &ExperimentContext, n_models: &[usize], workers: usize) -> Result<Vec<MetricsReport>> {
    run_shift_grid(ctx, &super::config::augmentation_study_cells(n_models), workers)
}

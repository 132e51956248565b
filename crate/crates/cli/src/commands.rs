use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use zoomshift::classifier::{
    build_classifier, class_names, save_classifier, train_classifier as fit_classifier, BackboneSpec,
    SamplingWeights, TrainConfig,
};
use zoomshift::dataset::io::{manifest_problems, parse_groups, read_patch_cache, write_dataset, write_patch_cache};
use zoomshift::dataset::{
    generate_phantom_dataset_with, make_splits_by_counts, weighted_sampler_weights, ClassLabel, LesionPatch,
    Partition, PhantomConfig, SplitFractions, SplitMode, ZoomGroup,
};
use zoomshift::experiments::runner::{CELLS_DIR, RESULTS_FILE};
use zoomshift::experiments::{
    augmentation_study_cells, build_patch_pool, comparison_cells, load_records, run_cells, shift_grid_cells,
    DataConfig, DataSource, ExperimentContext, GridConfig, RunOptions,
};
use zoomshift::imageops::{load_png, normalize_min_max, resize, save_png16};
use zoomshift::metrics::{accuracy, aggregate_folds, roc_auc_ovr, write_results_csv, MetricsReport};
use zoomshift::singan::{load_model, sample, save_model, train_singan as fit_singan, SinGANConfig};
use zoomshift::{classifier::argmax, metrics::sifid as sifid_score};

use crate::manifest::RunRecord;
use crate::{
    ExtractArgs, MakePhantomArgs, ReportArgs, RunExperimentArgs, SampleSinganArgs, SifidArgs, TrainClassifierArgs,
    TrainSinganArgs,
};

/// Reads a TOML config file, or the type's defaults when no file is given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn make_phantom(a: &MakePhantomArgs, rec: &mut RunRecord) -> Result<()> {
    let cfg: PhantomConfig = load_config(a.config.as_deref())?;
    ensure!((0.0..=1.0).contains(&a.prevalence), "--prevalence must lie in [0, 1]");
    rec.manifest_dir = Some(a.out.clone());
    rec.seeds = vec![a.seed];
    rec.inputs = a.config.iter().cloned().collect();
    rec.config(&serde_json::json!({
        "n_patients": a.n_patients,
        "prevalence": a.prevalence,
        "phantom": cfg,
    }))?;
    let records = generate_phantom_dataset_with(&cfg, a.n_patients, a.prevalence, a.seed);
    let manifest = write_dataset(&records, &a.out)?;
    let lesions = records.iter().filter(|r| r.lesion_mask.is_some()).count();
    println!(
        "wrote {} images ({lesions} with lesions) for {} patients to {}",
        records.len(),
        a.n_patients,
        manifest.display()
    );
    rec.outputs.push(manifest);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExtractSettings {
    healthy_per_image: usize,
    healthy_threshold: f32,
    healthy_seed: u64,
}

impl Default for ExtractSettings {
    fn default() -> Self {
        let d = DataConfig::default();
        ExtractSettings {
            healthy_per_image: d.healthy_per_image,
            healthy_threshold: d.healthy_threshold,
            healthy_seed: d.healthy_seed,
        }
    }
}

fn print_counts(patches: &[LesionPatch]) {
    let mut counts: BTreeMap<(ZoomGroup, ClassLabel), usize> = BTreeMap::new();
    for p in patches {
        *counts.entry((p.zoom_group, p.class_label)).or_default() += 1;
    }
    println!("group  healthy  benign  malignant");
    for g in ZoomGroup::ALL {
        let c = |l| counts.get(&(g, l)).copied().unwrap_or(0);
        println!(
            "{g:<6} {:>7}  {:>6}  {:>9}",
            c(ClassLabel::Healthy),
            c(ClassLabel::Benign),
            c(ClassLabel::Malignant)
        );
    }
}

pub fn extract_patches(a: &ExtractArgs, rec: &mut RunRecord) -> Result<()> {
    let mut settings: ExtractSettings = load_config(a.config.as_deref())?;
    if let Some(n) = a.healthy_per_image {
        settings.healthy_per_image = n;
    }
    if let Some(s) = a.seed {
        settings.healthy_seed = s;
    }
    let groups = parse_groups(&a.groups)?;
    ensure!(!groups.is_empty(), "--groups selects no zoom group");
    rec.manifest_dir = Some(a.out.clone());
    rec.seeds = vec![settings.healthy_seed];
    rec.inputs = vec![a.manifest.clone()];
    rec.config(&serde_json::json!({ "groups": groups, "settings": settings }))?;

    let problems = manifest_problems(&a.manifest)?;
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("{p}");
        }
        bail!("{} manifest row problem(s) in {}", problems.len(), a.manifest.display());
    }
    let data = DataConfig {
        source: DataSource::Manifest {
            path: a.manifest.clone(),
        },
        healthy_per_image: settings.healthy_per_image,
        healthy_threshold: settings.healthy_threshold,
        healthy_seed: settings.healthy_seed,
    };
    let records = load_records(&data)?;
    if records.is_empty() {
        log::warn!("manifest {} lists no images; writing an empty patch cache", a.manifest.display());
    }
    let patches: Vec<LesionPatch> = build_patch_pool(&records, &data)?
        .into_iter()
        .filter(|p| groups.contains(&p.zoom_group))
        .collect();
    write_patch_cache(&patches, &a.out)?;
    let lesions = patches.iter().filter(|p| p.class_label != ClassLabel::Healthy).count();
    println!("{} patches ({lesions} lesion) written to {}", patches.len(), a.out.display());
    print_counts(&patches);
    rec.outputs.push(a.out.join(zoomshift::dataset::io::PATCH_INDEX_FILE));
    Ok(())
}

fn find_patch(dir: &Path, patch_id: &str) -> Result<LesionPatch> {
    read_patch_cache(dir)?
        .into_iter()
        .find(|p| p.patch_id == patch_id)
        .with_context(|| format!("patch {patch_id} is not in {}", dir.display()))
}

pub fn train_singan(a: &TrainSinganArgs, rec: &mut RunRecord) -> Result<()> {
    let mut cfg: SinGANConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.max_dim {
        cfg.max_dim = m;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(i) = a.iterations_per_epoch {
        cfg.iterations_per_epoch = i;
    }
    cfg.validate()?;
    rec.manifest_dir = Some(a.out.clone());
    rec.seeds = vec![cfg.seed];
    rec.inputs = vec![a.patches.clone()];
    rec.config(&serde_json::json!({ "patch_id": a.patch_id, "singan": cfg }))?;

    let patch = find_patch(&a.patches, &a.patch_id)?;
    ensure!(
        patch.class_label != ClassLabel::Healthy,
        "patch {} is a healthy patch; SinGAN sources must be lesion patches",
        patch.patch_id
    );
    if patch.zoom_group != ZoomGroup::G1 && !a.allow_any_group {
        bail!(
            "patch {} belongs to {}; SinGAN models are trained on tightly cropped G1 lesion patches \
             (pass --allow-any-group to override)",
            patch.patch_id,
            patch.zoom_group
        );
    }
    let trained = fit_singan(&patch.pixels, &patch.source_image_id, &cfg)?;
    save_model(&trained.model, &a.out)?;
    save_png16(&trained.model.reconstruct(), &a.out.join("reconstruction.png"))?;
    for s in &trained.stats {
        println!(
            "scale {} {:?}: rec mse {:.5} -> {:.5}, {:.1}s",
            s.index, s.shape, s.rec_mse_before, s.rec_mse_after, s.seconds
        );
    }

    let backbone = BackboneSpec::default().load()?;
    let samples = sample(&trained.model, a.check_samples, cfg.seed);
    let real = resize(&patch.pixels, trained.model.finest_shape().0, trained.model.finest_shape().1);
    let scores = samples
        .iter()
        .map(|s| sifid_score(&real, s, backbone.as_ref()))
        .collect::<zoomshift::Result<Vec<f64>>>()?;
    let mut csv = String::from("sample,sifid\n");
    for (k, v) in scores.iter().enumerate() {
        csv.push_str(&format!("{k},{v}\n"));
    }
    let sifid_path = a.out.join("sifid.csv");
    std::fs::write(&sifid_path, csv).with_context(|| format!("writing {}", sifid_path.display()))?;
    if !scores.is_empty() {
        let agg = aggregate_folds(&scores)?;
        println!("SiFID over {} samples: {:.4} ± {:.4}", scores.len(), agg.mean, agg.sd);
    }
    rec.outputs.push(a.out.clone());
    Ok(())
}

pub fn sample_singan(a: &SampleSinganArgs, rec: &mut RunRecord) -> Result<()> {
    rec.manifest_dir = Some(a.out.clone());
    rec.seeds = vec![a.seed];
    rec.inputs = vec![a.model.clone()];
    rec.config(&serde_json::json!({ "n": a.n, "resize": a.resize }))?;
    let model = load_model(&a.model)?;
    for (k, img) in sample(&model, a.n, a.seed).into_iter().enumerate() {
        let img = match a.resize {
            Some(side) => normalize_min_max(&resize(&img, side, side)),
            None => img,
        };
        let path = a.out.join(format!("sample_{k:04}.png"));
        save_png16(&img, &path)?;
        rec.outputs.push(path);
    }
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

pub fn sifid(a: &SifidArgs, rec: &mut RunRecord) -> Result<()> {
    let spec: BackboneSpec = load_config(a.config.as_deref())?;
    rec.manifest_dir = a.out.as_ref().map(|p| p.parent().unwrap_or(Path::new(".")).to_path_buf());
    rec.inputs = std::iter::once(a.real.clone()).chain(a.fake.iter().cloned()).collect();
    rec.config(&spec)?;
    let backbone = spec.load()?;
    let real = load_png(&a.real)?;
    let mut csv = String::from("fake,sifid\n");
    let mut scores = Vec::new();
    for f in &a.fake {
        let v = sifid_score(&real, &load_png(f)?, backbone.as_ref())?;
        println!("{}\t{v:.6}", f.display());
        csv.push_str(&format!("{},{v}\n", f.display()));
        scores.push(v);
    }
    let agg = aggregate_folds(&scores)?;
    println!("mean {:.6} ± {:.6} (n = {})", agg.mean, agg.sd, agg.n);
    if let Some(out) = &a.out {
        std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
        rec.outputs.push(out.clone());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ClassifierSettings {
    train: TrainConfig,
    backbone: BackboneSpec,
    n_folds: usize,
    split_fractions: SplitFractions,
    split_mode: SplitMode,
    split_seed: u64,
    seed: u64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            train: TrainConfig::default(),
            backbone: BackboneSpec::default(),
            n_folds: 3,
            split_fractions: SplitFractions::default(),
            split_mode: SplitMode::RotatingTest,
            split_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
struct ClassifierEvaluation {
    fold: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    best_epoch: usize,
    accuracy: f64,
    auc: BTreeMap<String, f64>,
}

pub fn train_classifier(a: &TrainClassifierArgs, rec: &mut RunRecord) -> Result<()> {
    let mut s: ClassifierSettings = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        s.train.epochs = e;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    s.train.validate()?;
    let train_groups = parse_groups(&a.train_groups)?;
    let test_groups = match &a.test_groups {
        Some(t) => parse_groups(t)?,
        None => train_groups.clone(),
    };
    ensure!(a.fold < s.n_folds, "--fold {} is out of range for {} folds", a.fold, s.n_folds);
    rec.manifest_dir = Some(a.out.clone());
    rec.seeds = vec![s.seed];
    rec.inputs = vec![a.patches.clone()];
    rec.config(&serde_json::json!({
        "settings": s,
        "train_groups": train_groups,
        "test_groups": test_groups,
        "fold": a.fold,
        "binary": a.binary,
    }))?;

    let patches: Vec<LesionPatch> = read_patch_cache(&a.patches)?
        .into_iter()
        .filter(|p| p.provenance.is_real())
        .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in &patches {
        *counts.entry(p.patient_id.clone()).or_default() += 1;
    }
    let splits = make_splits_by_counts(&counts, s.n_folds, s.split_fractions, s.split_mode, s.split_seed)?;
    let split = &splits[a.fold];
    let subset = |part: Partition, groups: &[ZoomGroup]| -> Vec<LesionPatch> {
        patches
            .iter()
            .filter(|p| groups.contains(&p.zoom_group) && split.partition_of(&p.patient_id) == Some(part))
            .cloned()
            .collect()
    };
    let train = subset(Partition::Train, &train_groups);
    let val = subset(Partition::Val, &train_groups);
    let test = subset(Partition::Test, &test_groups);
    ensure!(!train.is_empty() && !val.is_empty() && !test.is_empty(), "a partition of fold {} is empty", a.fold);

    let num_classes = if a.binary { 2 } else { 3 };
    let model = build_classifier(num_classes, &s.backbone, s.seed)?;
    let targets = |set: &[LesionPatch]| set.iter().map(|p| model.target_index(p.class_label)).collect::<Vec<_>>();
    let weights = SamplingWeights {
        train: Some(weighted_sampler_weights(&targets(&train), num_classes)?),
        val: Some(weighted_sampler_weights(&targets(&val), num_classes)?),
    };
    let trained = fit_classifier(&model, &train, &val, &s.train, &weights, s.seed)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ckpt = a.out.join("classifier.json");
    save_classifier(&trained.model, Some(&s.train), &ckpt)?;
    trained.history.write_csv(&a.out.join("history.csv"))?;

    let scores = trained.model.predict_proba(&test)?;
    let truth = targets(&test);
    let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let names = class_names(num_classes)?;
    let mut csv = format!("patch_id,label,{}\n", names.iter().map(|n| format!("score_{n}")).collect::<Vec<_>>().join(","));
    for (p, sc) in test.iter().zip(&scores) {
        let cols: Vec<String> = sc.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{},{},{}\n", p.patch_id, names[model.target_index(p.class_label)], cols.join(",")));
    }
    let pred_path = a.out.join("predictions.csv");
    std::fs::write(&pred_path, csv).with_context(|| format!("writing {}", pred_path.display()))?;
    let eval = ClassifierEvaluation {
        fold: a.fold,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        best_epoch: trained.history.best_epoch,
        accuracy: accuracy(&predicted, &truth)?,
        auc: roc_auc_ovr(&scores, &truth, &names)?,
    };
    write_json(&a.out.join("metrics.json"), &eval)?;
    println!(
        "fold {}: best epoch {}, test accuracy {:.4}, AUC {}",
        eval.fold,
        eval.best_epoch,
        eval.accuracy,
        eval.auc.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ")
    );
    rec.outputs.extend([ckpt, pred_path, a.out.join("metrics.json"), a.out.join("history.csv")]);
    Ok(())
}

fn preset_grid(name: &str) -> Result<GridConfig> {
    let cells = match name {
        "shift" => shift_grid_cells(),
        "augmentation" => augmentation_study_cells(&[0, 1, 2, 4]),
        "comparison" => comparison_cells(4),
        other => bail!("unknown preset {other:?}; expected shift, augmentation or comparison"),
    };
    let mut grid = GridConfig {
        name: name.to_string(),
        cells,
        ..GridConfig::default()
    };
    if name == "comparison" {
        grid.defaults.split_mode = SplitMode::FixedTest;
    }
    Ok(grid)
}

fn fmt_cell(m: Option<zoomshift::metrics::MeanSd>) -> String {
    m.map_or("-".into(), |m| format!("{:.3}±{:.3}", m.mean, m.sd))
}

fn print_table(reports: &[MetricsReport]) {
    let width = reports.iter().map(|r| r.cell.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:<13}  {:<13}  {:<13}  {:<13}", "cell", "accuracy", "auc healthy", "auc benign", "auc malignant");
    for r in reports {
        println!(
            "{:<width$}  {:<13}  {:<13}  {:<13}  {:<13}",
            r.cell,
            fmt_cell(Some(r.overall_accuracy)),
            fmt_cell(r.auc("healthy")),
            fmt_cell(r.auc("benign")),
            fmt_cell(r.auc("malignant")),
        );
    }
}

pub fn run_experiment(a: &RunExperimentArgs, rec: &mut RunRecord) -> Result<()> {
    let mut grid = match (&a.config, &a.preset) {
        (Some(path), _) => GridConfig::load(path)?,
        (None, Some(p)) => preset_grid(p)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(seed) = a.seed {
        grid.defaults.seeds = vec![seed];
        for c in &mut grid.cells {
            c.seeds = None;
        }
    }
    grid.validate()?;
    rec.manifest_dir = Some(a.out.clone());
    rec.inputs = a.config.iter().cloned().collect();
    let mut seeds: Vec<u64> = grid.resolved_cells().iter().flat_map(|c| c.seeds.clone()).collect();
    seeds.sort_unstable();
    seeds.dedup();
    rec.seeds = seeds;
    rec.config(&grid)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("grid.toml"), grid.to_toml_string()?).context("writing grid.toml")?;

    let singan_cache = a.cache_dir.as_ref().map(|c| c.join("singan"));
    let ctx = ExperimentContext::new(grid)?.with_singan_cache(singan_cache);
    let cells = ctx.grid.resolved_cells();
    let opts = RunOptions {
        workers: a.workers,
        out_dir: Some(a.out.clone()),
        max_new_cells: a.max_new_cells,
    };
    let outcomes = run_cells(&ctx, &cells, &opts)?;
    let reports: Vec<MetricsReport> = outcomes.iter().filter_map(|o| o.report.clone()).collect();
    print_table(&reports);
    let resumed = outcomes.iter().filter(|o| o.resumed).count();
    let failed: Vec<&str> = outcomes.iter().filter(|o| o.error.is_some()).map(|o| o.name.as_str()).collect();
    let skipped = cells.len() - outcomes.len();
    println!(
        "{} cells: {} computed, {resumed} resumed, {} failed, {skipped} not run",
        cells.len(),
        outcomes.len() - resumed - failed.len(),
        failed.len()
    );
    rec.outputs.push(a.out.join(RESULTS_FILE));
    if !failed.is_empty() {
        bail!("cells failed: {} (details in failures.json)", failed.join(", "));
    }
    if skipped > 0 {
        bail!("{skipped} cells were not run; rerun to resume");
    }
    Ok(())
}

pub fn report(a: &ReportArgs, rec: &mut RunRecord) -> Result<()> {
    rec.manifest_dir = Some(a.dir.clone());
    let cells_dir = a.dir.join(CELLS_DIR);
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&cells_dir)
        .with_context(|| format!("reading {}", cells_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for p in &paths {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        reports.push(serde_json::from_slice::<MetricsReport>(&bytes).with_context(|| format!("parsing {}", p.display()))?);
    }
    // the grid written alongside the cells fixes the row order
    let order: Vec<String> = match std::fs::read_to_string(a.dir.join("grid.toml")) {
        Ok(text) => GridConfig::from_toml_str(&text)?.resolved_cells().into_iter().map(|c| c.name).collect(),
        Err(_) => Vec::new(),
    };
    reports.sort_by_key(|r| (order.iter().position(|n| *n == r.cell).unwrap_or(usize::MAX), r.cell.clone()));
    rec.inputs = paths;
    let out = a.dir.join(RESULTS_FILE);
    write_results_csv(&reports, &out)?;
    zoomshift::experiments::plot::write_auc_plots(&reports, &a.dir)?;
    print_table(&reports);
    rec.outputs.push(out);
    Ok(())
}

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use zoomshift::classifier::{build_classifier, BackboneSpec, ClassifierModel, TrainConfig};
use zoomshift::dataset::{
    extract_lesion_patches, generate_phantom_dataset, BiopsyLabel, ClassLabel, LesionPatch, Partition, Provenance,
    SplitMode, ZoomGroup,
};
use zoomshift::experiments::*;
use zoomshift::singan::{train_singan, SinGANConfig, SinGANModel};
use zoomshift::Error;

fn tiny_singan() -> SinGANConfig {
    SinGANConfig {
        max_dim: 25,
        epochs: 1,
        iterations_per_epoch: 1,
        ..SinGANConfig::default()
    }
}

fn lesion_patches() -> &'static [LesionPatch] {
    static P: OnceLock<Vec<LesionPatch>> = OnceLock::new();
    P.get_or_init(|| {
        generate_phantom_dataset(16, 1.0, 8)
            .iter()
            .flat_map(|r| extract_lesion_patches(r, &[ZoomGroup::G1]).unwrap())
            .collect()
    })
}

/// Four single-scale SinGANs on distinct malignant patches.
fn tiny_models() -> &'static [(String, String, SinGANModel)] {
    static M: OnceLock<Vec<(String, String, SinGANModel)>> = OnceLock::new();
    M.get_or_init(|| {
        lesion_patches()
            .iter()
            .filter(|p| p.class_label == ClassLabel::Malignant)
            .take(4)
            .map(|p| {
                let m = train_singan(&p.pixels, &p.source_image_id, &tiny_singan()).unwrap().model;
                (p.patch_id.clone(), p.patient_id.clone(), m)
            })
            .collect()
    })
}

fn sources(n: usize) -> Vec<SyntheticSource<'static>> {
    tiny_models()[..n]
        .iter()
        .map(|(id, pid, m)| SyntheticSource {
            model_id: id,
            patient_id: pid,
            model: m,
        })
        .collect()
}

fn count(patches: &[LesionPatch], label: ClassLabel) -> usize {
    patches.iter().filter(|p| p.class_label == label).count()
}

#[test]
fn synthetic_balancing_restores_parity_for_every_model_count() {
    let base = lesion_patches();
    assert_eq!(tiny_models().len(), 4);
    let deficit = balance_deficit(base, ClassLabel::Malignant);
    assert!(deficit > 0);
    let mut totals = Vec::new();
    for n in [1, 2, 4] {
        let out = assemble_augmented_trainset(base, &sources(n), ClassLabel::Malignant, None, 3).unwrap();
        assert_eq!(count(&out, ClassLabel::Malignant), count(&out, ClassLabel::Benign));
        let synth: Vec<&LesionPatch> = out.iter().filter(|p| !p.provenance.is_real()).collect();
        totals.push(synth.len());
        let mut per_model = std::collections::BTreeMap::new();
        for p in &synth {
            p.validate().unwrap();
            assert_eq!(p.class_label, ClassLabel::Malignant);
            match &p.provenance {
                Provenance::Synthetic { model_id } => *per_model.entry(model_id.clone()).or_insert(0usize) += 1,
                other => panic!("unexpected provenance {other}"),
            }
        }
        let counts: Vec<usize> = sources(n).iter().map(|s| per_model[s.model_id]).collect();
        assert_eq!(counts, split_counts(deficit, n));
        let ids: BTreeSet<&str> = out.iter().map(|p| p.patch_id.as_str()).collect();
        assert_eq!(ids.len(), out.len());
    }
    assert!(totals.iter().all(|&t| t == deficit), "{totals:?}");
    let again = assemble_augmented_trainset(base, &sources(2), ClassLabel::Malignant, None, 3).unwrap();
    assert_eq!(again, assemble_augmented_trainset(base, &sources(2), ClassLabel::Malignant, None, 3).unwrap());
}

#[test]
fn oversampling_restores_parity_with_marked_duplicates() {
    let base = lesion_patches();
    let malignant: Vec<LesionPatch> = base.iter().filter(|p| p.class_label == ClassLabel::Malignant).take(2).cloned().collect();
    let out = oversample_images(&malignant, base, ClassLabel::Malignant).unwrap();
    assert_eq!(count(&out, ClassLabel::Malignant), count(&out, ClassLabel::Benign));
    assert_eq!(&out[..base.len()], base);
    for p in &out[base.len()..] {
        assert!(matches!(p.provenance, Provenance::Oversampled { .. }));
    }
    let benign: Vec<LesionPatch> = base.iter().filter(|p| p.class_label == ClassLabel::Benign).take(1).cloned().collect();
    assert!(oversample_images(&benign, base, ClassLabel::Malignant).is_err());
    assert!(oversample_images(&[], base, ClassLabel::Malignant).is_err());
}

proptest! {
    #[test]
    fn split_counts_are_even_and_complete(total in 0usize..500, parts in 1usize..9) {
        let c = split_counts(total, parts);
        prop_assert_eq!(c.len(), parts);
        prop_assert_eq!(c.iter().sum::<usize>(), total);
        prop_assert!(c.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }
}

#[test]
fn crop_probe_is_deterministic() {
    let p = &lesion_patches()[0];
    let cfg = CropConfig::default();
    let a = random_resized_crop(p, &cfg, 5).unwrap();
    assert_eq!(a, random_resized_crop(p, &cfg, 5).unwrap());
    assert_ne!(a.pixels, random_resized_crop(p, &cfg, 6).unwrap().pixels);
    assert_eq!(a.pixels.dim(), p.pixels.dim());
    assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
}

fn members(seeds: &[u64]) -> Vec<ClassifierModel> {
    let spec = BackboneSpec::default();
    let first = build_classifier(3, &spec, seeds[0]).unwrap();
    seeds
        .iter()
        .map(|&s| {
            let mut m = first.clone();
            m.head = build_classifier(3, &spec, s).unwrap().head;
            m
        })
        .collect()
}

#[test]
fn ensemble_contract() {
    let patches = &lesion_patches()[..4];
    let ms = members(&[1, 2, 3]);
    let single = EnsemblePredictor::new(vec![ms[0].clone()]).unwrap();
    assert_eq!(ensemble_predict(&single, patches).unwrap(), ms[0].predict_proba(patches).unwrap());

    let each: Vec<Vec<Vec<f64>>> = ms.iter().map(|m| m.predict_proba(patches).unwrap()).collect();
    let forward = ensemble_predict(&EnsemblePredictor::new(ms.clone()).unwrap(), patches).unwrap();
    let reversed = ensemble_predict(&EnsemblePredictor::new(ms.iter().rev().cloned().collect()).unwrap(), patches).unwrap();
    assert_eq!(forward, reversed);
    for (i, row) in forward.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let oracle = (each[0][i][c] + each[1][i][c] + each[2][i][c]) / 3.0;
            assert!((v - oracle).abs() < 1e-12);
        }
    }

    assert!(matches!(EnsemblePredictor::new(vec![]), Err(Error::EmptyInput(_))));
    let binary = build_classifier(2, &BackboneSpec::default(), 0).unwrap();
    assert!(matches!(
        EnsemblePredictor::new(vec![ms[0].clone(), binary]),
        Err(Error::IncompatibleMembers)
    ));
    assert!(mean_scores(&[vec![vec![0.1, 0.2]], vec![vec![0.1]]]).is_err());
}

fn small_grid() -> GridConfig {
    let mut grid = GridConfig {
        name: "small".into(),
        data: DataConfig {
            source: DataSource::Phantom {
                n_patients: 30,
                prevalence: 0.5,
                seed: 2,
                phantom: Default::default(),
            },
            healthy_per_image: 1,
            ..DataConfig::default()
        },
        singan: tiny_singan(),
        ..GridConfig::default()
    };
    grid.defaults.train_config = TrainConfig {
        epochs: 3,
        batch_size: 32,
        ..TrainConfig::default()
    };
    grid.defaults.split_mode = SplitMode::FixedTest;
    let mut base = CellSpec::new("G3->G1 none", &[ZoomGroup::G3], &[ZoomGroup::G1]);
    base.ensemble = true;
    let mut combined = CellSpec::new("G3->G1 combined", &[ZoomGroup::G3], &[ZoomGroup::G1]);
    combined.ensemble = true;
    combined.augmentation = Augmentation::Combined {
        n_models: 1,
        source_image_ids: Vec::new(),
    };
    let mut crop = CellSpec::new("G1->G1 crop", &[ZoomGroup::G1], &[ZoomGroup::G1]);
    crop.crop_probe = true;
    crop.split_mode = Some(SplitMode::RotatingTest);
    grid.cells = vec![base, combined, crop];
    grid
}

fn context() -> &'static ExperimentContext {
    static C: OnceLock<ExperimentContext> = OnceLock::new();
    C.get_or_init(|| ExperimentContext::new(small_grid()).unwrap())
}

fn results(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join("results.csv")).unwrap()
}

#[test]
fn grid_runs_resume_and_reproduce() {
    let ctx = context();
    let cells = ctx.grid.resolved_cells();

    let full = tempfile::tempdir().unwrap();
    let outcomes = run_cells(ctx, &cells, &RunOptions { workers: 1, out_dir: Some(full.path().into()), max_new_cells: None }).unwrap();
    assert!(outcomes.iter().all(|o| o.error.is_none() && !o.resumed), "{outcomes:?}");
    let combined = outcomes[1].report.as_ref().unwrap();
    assert!(combined.notes.iter().any(|n| n == "ensemble of 6 members per seed"), "{:?}", combined.notes);
    for class in ["healthy", "benign", "malignant"] {
        let auc = combined.auc(class).unwrap();
        assert!((0.0..=1.0).contains(&auc.mean));
    }
    for cls in ["healthy", "benign", "malignant"] {
        assert!(full.path().join(format!("auc_{cls}.png")).is_file());
    }

    // interrupted after one cell, then resumed
    let partial = tempfile::tempdir().unwrap();
    let opts = |max| RunOptions { workers: 1, out_dir: Some(partial.path().into()), max_new_cells: max };
    let first = run_cells(ctx, &cells, &opts(Some(1))).unwrap();
    assert_eq!(first.len(), 1);
    let resumed = run_cells(ctx, &cells, &opts(None)).unwrap();
    assert_eq!(resumed.iter().filter(|o| o.resumed).count(), 1);
    assert_eq!(results(partial.path()), results(full.path()));

    // fresh context, same seeds
    let fresh = ExperimentContext::new(small_grid()).unwrap();
    let again = tempfile::tempdir().unwrap();
    run_cells(&fresh, &fresh.grid.resolved_cells(), &RunOptions { workers: 2, out_dir: Some(again.path().into()), max_new_cells: None }).unwrap();
    assert_eq!(results(again.path()), results(full.path()));
}

#[test]
fn fixed_test_patients_are_shared_and_untouched_by_augmentation() {
    let ctx = context();
    let fixed = ctx.splits(SplitMode::FixedTest).unwrap();
    let test = fixed[0].patients(Partition::Test);
    assert!(fixed.iter().all(|s| s.patients(Partition::Test) == test));

    // every augmentation source lives in its fold's training partition
    let aug = Augmentation::Combined {
        n_models: 1,
        source_image_ids: Vec::new(),
    };
    for fold in 0..fixed.len() {
        for i in ctx.source_patches(&aug, &fixed, fold).unwrap() {
            let p = &ctx.pool[i];
            assert_eq!(p.class_label, ClassLabel::Malignant);
            assert_eq!(p.zoom_group, ZoomGroup::G1);
            assert_eq!(fixed[fold].partition_of(&p.patient_id), Some(Partition::Train));
        }
    }

    // the pool holds only real patches and each source image has all groups
    assert!(ctx.pool.iter().all(|p| p.provenance.is_real()));
    let lesion_images: BTreeSet<&str> = ctx
        .records
        .iter()
        .filter(|r| r.biopsy_label != BiopsyLabel::None)
        .map(|r| r.image_id.as_str())
        .collect();
    for g in ZoomGroup::ALL {
        let with_group: BTreeSet<&str> = ctx
            .pool
            .iter()
            .filter(|p| p.zoom_group == g && p.class_label != ClassLabel::Healthy)
            .map(|p| p.source_image_id.as_str())
            .collect();
        assert_eq!(with_group, lesion_images);
    }
}

#[test]
fn synthetic_patches_never_reach_validation_or_test() {
    let ctx = context();
    let splits = ctx.splits(SplitMode::RotatingTest).unwrap();
    let split = &splits[0];
    let train: Vec<LesionPatch> = ctx
        .indices(split, Partition::Train, &[ZoomGroup::G3])
        .into_iter()
        .map(|i| ctx.pool[i].clone())
        .collect();
    let aug = Augmentation::Singan {
        n_models: 1,
        source_image_ids: Vec::new(),
    };
    let src = ctx.source_patches(&aug, &splits, 0).unwrap();
    let model = ctx.singan_for(src[0]).unwrap();
    let key = format!("m{}", src[0]);
    let source = SyntheticSource {
        model_id: &key,
        patient_id: &ctx.pool[src[0]].patient_id,
        model: &model,
    };
    let augmented = assemble_augmented_trainset(&train, &[source], ClassLabel::Malignant, None, 1).unwrap();
    let train_ids: BTreeSet<&str> = augmented.iter().map(|p| p.patch_id.as_str()).collect();
    for part in [Partition::Val, Partition::Test] {
        for i in ctx.indices(split, part, &ZoomGroup::ALL) {
            let p = &ctx.pool[i];
            assert!(p.provenance.is_real());
            assert!(!train_ids.contains(p.patch_id.as_str()));
        }
    }
    let _ = Arc::strong_count(&model);
}

#[test]
fn presets_cover_the_study_axes() {
    assert_eq!(shift_grid_cells().len(), 11);
    let study = augmentation_study_cells(&[0, 1, 2, 4]);
    let resolved: Vec<_> = study.iter().map(|c| c.resolve(&Default::default())).collect();
    assert_eq!(resolved[0].augmentation, Augmentation::None);
    assert_eq!(resolved[3].augmentation.n_sources(), 4);
    let cmp = comparison_cells(4);
    assert_eq!(cmp.len(), 16);
    assert!(cmp.iter().all(|c| c.ensemble));

    let mut grid = GridConfig::default();
    grid.cells = cmp;
    grid.validate().unwrap();
    let text = grid.to_toml_string().unwrap();
    assert_eq!(GridConfig::from_toml_str(&text).unwrap(), grid);
    grid.cells[0].split_mode = Some(SplitMode::RotatingTest);
    assert!(grid.validate().is_err());
}

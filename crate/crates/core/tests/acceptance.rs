//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `ZOOMSHIFT_ACCEPTANCE_ONLY=6,7` restricts the run to the listed criteria.
//! Grid outputs are kept under the cargo target tmpdir for inspection.

mod support;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomshift::classifier::*;
use zoomshift::dataset::*;
use zoomshift::experiments::*;
use zoomshift::imageops::resize;
use zoomshift::metrics::*;
use zoomshift::singan::*;

use support::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn out_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).expect("stale output removable");
    }
    dir
}

fn reports(outcomes: Vec<CellOutcome>) -> Result<BTreeMap<String, MetricsReport>, String> {
    outcomes
        .into_iter()
        .map(|o| match (o.report, o.error) {
            (Some(r), None) => Ok((o.name, r)),
            (_, e) => Err(format!("cell {} failed: {}", o.name, e.unwrap_or_default())),
        })
        .collect()
}

fn malignant(reports: &BTreeMap<String, MetricsReport>, cell: &str) -> Result<f64, String> {
    let r = reports.get(cell).ok_or_else(|| format!("no cell {cell}"))?;
    Ok(r.auc("malignant").ok_or("no malignant AUC")?.mean)
}

fn structural_fidelity() -> Outcome {
    let spec = BackboneSpec::default();
    let model = build_classifier(3, &spec, 0).map_err(err)?;
    ensure(model.trainable_params() == 6147, || format!("{} trainable parameters", model.trainable_params()))?;
    let patches: Vec<LesionPatch> = generate_phantom_dataset(6, 0.7, 2)
        .iter()
        .filter(|r| r.lesion_mask.is_some())
        .flat_map(|r| extract_lesion_patches(r, &ZoomGroup::ALL).unwrap())
        .collect();
    let before = model.backbone.param_hash();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let trained = train_classifier(&model, &patches, &patches, &cfg, &SamplingWeights::default(), 0).map_err(err)?;
    ensure(trained.model.backbone.param_hash() == before, || "backbone changed during training".into())?;
    ensure(trained.model.head != model.head, || "head did not train".into())?;
    Ok(format!("6147 trainable parameters, backbone hash {} unchanged", &before[..12]))
}

fn random_mask(rng: &mut ChaCha8Rng) -> Array2<bool> {
    let (rows, cols) = (rng.random_range(8..200), rng.random_range(8..200));
    let mut mask = Array2::from_elem((rows, cols), false);
    for _ in 0..rng.random_range(1..4) {
        let h = rng.random_range(1..=rows.min(40));
        let w = rng.random_range(1..=cols.min(40));
        let r0 = rng.random_range(0..=rows - h);
        let c0 = rng.random_range(0..=cols - w);
        mask.slice_mut(ndarray::s![r0..r0 + h, c0..c0 + w]).fill(true);
    }
    mask
}

fn geometry_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for i in 0..500 {
        let mask = random_mask(&mut rng);
        let tight = tight_bbox(&mask).map_err(err)?;
        let boxes: Vec<BoundingBox> = ZoomGroup::ALL.iter().map(|&g| expand_bbox(&tight, g, mask.dim())).collect();
        for (k, b) in boxes.iter().enumerate() {
            ensure((b.height, b.width) == (tight.height * (k + 1), tight.width * (k + 1)), || {
                format!("mask {i}: G{} box {}x{} for tight {}x{}", k + 1, b.height, b.width, tight.height, tight.width)
            })?;
            ensure(b.extent.within(mask.nrows(), mask.ncols()) && b.extent.contains(&tight.extent), || {
                format!("mask {i}: G{} extent misplaced", k + 1)
            })?;
        }
        let nominal: Vec<Extent> = boxes.iter().map(|b| b.nominal_extent()).collect();
        ensure(nominal[1].contains(&nominal[0]) && nominal[2].contains(&nominal[1]), || {
            format!("mask {i}: containment chain broken")
        })?;
    }
    let records = generate_phantom_dataset(200, 0.5, 11);
    let mut folds = 0;
    for mode in [SplitMode::RotatingTest, SplitMode::FixedTest] {
        for s in make_splits(&records, 3, SplitFractions::default(), mode, 7).map_err(err)? {
            let mut seen = std::collections::BTreeSet::new();
            for part in [Partition::Train, Partition::Val, Partition::Test] {
                for pid in s.patients(part) {
                    ensure(seen.insert(pid), || format!("patient {pid} leaks in fold {} ({mode:?})", s.fold_id))?;
                }
            }
            folds += 1;
        }
    }
    Ok(format!("500 masks; no leakage over {folds} folds of 200 patients"))
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for norm in [PenaltyNorm::Sample, PenaltyNorm::Pixel] {
        let real = batch(&mut rng, &[3, 1, 5, 6]);
        let fake = batch(&mut rng, &[3, 1, 5, 6]);
        let loss = critic_loss_wgan_gp_with(&ConstantCritic(2.5), &real, &fake, 0.1, norm, 9).item();
        worst = worst.max((loss - 0.1).abs());
    }
    for seed in 0..20u64 {
        let channels = 1 + seed as usize % 2;
        let shape = [1 + seed as usize % 3, channels, 4, 5];
        let real = batch(&mut rng, &shape);
        let fake = batch(&mut rng, &shape);
        let w: Vec<f64> = (0..channels * 20).map(|_| rng.random_range(-0.6..0.6)).collect();
        let lambda = rng.random_range(0.0..2.0);
        let critic = LinearCritic {
            w: w.clone(),
            shape: vec![1, channels, 4, 5],
        };
        let wasserstein: f64 = w
            .iter()
            .zip(mean_image(&fake).iter().zip(mean_image(&real)))
            .map(|(wi, (f, r))| wi * (f - r))
            .sum();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = critic_loss_wgan_gp(&critic, &real, &fake, lambda, seed).item();
        worst = worst.max((got - wasserstein - lambda * (norm - 1.0).powi(2)).abs());
        let pixel: f64 = (0..20)
            .map(|p| ((0..channels).map(|c| w[c * 20 + p].powi(2)).sum::<f64>().sqrt() - 1.0).powi(2))
            .sum::<f64>()
            / 20.0;
        let got = critic_loss_wgan_gp_with(&critic, &real, &fake, lambda, PenaltyNorm::Pixel, seed).item();
        worst = worst.max((got - wasserstein - lambda * pixel).abs());
    }
    ensure(worst < 1e-5, || format!("critic closed form off by {worst:e}"))?;

    let mut mse_err = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let a = batch(&mut rng, &[1, 1, h, w]);
        let b = batch(&mut rng, &[1, 1, h, w]);
        let oracle = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (h * w) as f64;
        mse_err = mse_err.max((mse(&a, &b).item() - oracle).abs());
    }
    let patch = phantom_patch(32);
    let cfg = SinGANConfig {
        epochs: 2,
        iterations_per_epoch: 2,
        ..SinGANConfig::default()
    };
    let model = train_singan(&patch, "oracle", &cfg).map_err(err)?.model;
    let target = resize(&patch, model.finest_shape().0, model.finest_shape().1);
    let rec = model.reconstruct();
    let oracle = rec.iter().zip(target.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / rec.len() as f64;
    let chain = reconstruction_loss(&model, model.scales.len(), &target).map_err(err)?;
    mse_err = mse_err.max((chain - oracle).abs());
    ensure(mse_err < 1e-7, || format!("reconstruction MSE off by {mse_err:e}"))?;

    let head_err = head_gradient_error();
    ensure(head_err < 1e-4, || format!("head gradient relative error {head_err:e}"))?;
    let mut scale_err = generator_gradient_error(11).max(generator_gradient_error(31));
    for norm in [PenaltyNorm::Sample, PenaltyNorm::Pixel] {
        scale_err = scale_err.max(critic_gradient_error(norm, 21));
    }
    ensure(scale_err < 1e-3, || format!("per-scale gradient relative error {scale_err:e}"))?;
    Ok(format!(
        "critic {worst:.1e}, MSE {mse_err:.1e}, head FD {head_err:.1e}, scale FD {scale_err:.1e}"
    ))
}

fn head_gradient_error() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = LinearHead::new(3, FEATURE_DIM, seed);
        for b in head.bias.iter_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let feats: Vec<Vec<f32>> = (0..4).map(|_| (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = feats.iter().map(Vec::as_slice).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..2.0)).collect();
        let weights = (seed % 2 == 1).then_some(w.as_slice());
        let (_, grad) = head.loss_and_grad(&refs, &labels, weights);
        let h = 1e-5;
        for _ in 0..12 {
            let i = rng.random_range(0..head.weight.len());
            let (mut up, mut down) = (head.clone(), head.clone());
            up.weight[i] += h;
            down.weight[i] -= h;
            let fd = (up.loss(&refs, &labels, weights) - down.loss(&refs, &labels, weights)) / (2.0 * h);
            worst = worst.max(relative_error(fd, grad.weight[i]));
        }
    }
    worst
}

fn singan_smoke() -> Outcome {
    let patch = phantom_patch(64);
    let trained = train_singan(&patch, "smoke", &SinGANConfig::default()).map_err(err)?;
    let model = &trained.model;
    let rec = reconstruction_loss(model, model.scales.len(), &patch).map_err(err)?;
    ensure(rec < 0.01, || format!("full-chain reconstruction MSE {rec:.4}"))?;
    let backbone = FilterbankBackbone::new();
    let mean_sifid = |images: &[Array2<f32>]| -> Result<f64, String> {
        let total = images.iter().map(|x| sifid(&patch, x, &backbone)).sum::<zoomshift::Result<f64>>().map_err(err)?;
        Ok(total / images.len() as f64)
    };
    let generated = mean_sifid(&sample(model, 50, 99))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise: Vec<Array2<f32>> = (0..50).map(|_| Array2::from_shape_fn(patch.dim(), |_| rng.random::<f32>())).collect();
    let baseline = mean_sifid(&noise)?;
    ensure(generated * 10.0 <= baseline, || format!("SiFID {generated:.4} vs noise {baseline:.4}"))?;
    Ok(format!(
        "{} scales, reconstruction MSE {rec:.2e}, SiFID {generated:.4} vs noise {baseline:.4} ({:.1}x)",
        model.scales.len(),
        baseline / generated
    ))
}

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut halves = 0u64;
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    for (i, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        for (j, _) in positive.iter().enumerate().filter(|(_, &p)| !p) {
            halves += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    halves as f64 / (2 * n_pos * n_neg) as f64
}

fn metric_oracles() -> Outcome {
    let names = class_names(3).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for inst in 0..100 {
        let n = rng.random_range(3..=200);
        let levels = rng.random_range(2..40);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        labels[..3].copy_from_slice(&[0, 1, 2]);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect())
            .collect();
        let auc = roc_auc_ovr(&scores, &labels, &names).map_err(err)?;
        for (c, name) in names.iter().enumerate() {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            let oracle = pairwise_auc(&col, &pos);
            ensure(auc[name] == oracle, || format!("instance {inst} {name}: {} vs {oracle}", auc[name]))?;
        }
    }

    let backbone = FilterbankBackbone::new();
    let mut self_sifid = 0.0f64;
    let lesion = generate_phantom_dataset(6, 1.0, 1);
    for p in extract_lesion_patches(&lesion[0], &ZoomGroup::ALL).map_err(err)? {
        self_sifid = self_sifid.max(sifid(&p.pixels, &p.pixels, &backbone).map_err(err)?);
    }
    let noise = Array2::from_shape_fn((64, 64), |_| rng.random::<f32>());
    self_sifid = self_sifid.max(sifid(&noise, &noise, &backbone).map_err(err)?);
    ensure(self_sifid <= 1e-6, || format!("sifid(x, x) = {self_sifid:e}"))?;

    let mut frechet_err = 0.0f64;
    for _ in 0..50 {
        let dim = rng.random_range(1..8);
        let q = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..3.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..3.0)).collect();
        let cov = |d: &[f64]| &q * DMatrix::from_diagonal(&DVector::from_column_slice(d)) * q.transpose();
        let mu_a = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
        let mu_b = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
        let expected = (&mu_a - &mu_b).norm_squared()
            + a.iter().zip(&b).map(|(x, y)| x + y - 2.0 * (x * y).sqrt()).sum::<f64>();
        let sa = FeatureStats {
            mean: mu_a,
            cov: cov(&a),
            n_locations: 100,
        };
        let sb = FeatureStats {
            mean: mu_b,
            cov: cov(&b),
            n_locations: 100,
        };
        frechet_err = frechet_err.max((frechet_distance(&sa, &sb).map_err(err)? - expected).abs());
    }
    ensure(frechet_err < 1e-6, || format!("Fréchet off by {frechet_err:e}"))?;
    Ok(format!("AUC exact on 100 instances, sifid(x, x) {self_sifid:.1e}, Fréchet {frechet_err:.1e}"))
}

/// 40 phantom patients, tiny SinGANs, short head training.
fn small_grid(cells: Vec<CellSpec>) -> GridConfig {
    let mut grid = GridConfig {
        name: "small".into(),
        data: DataConfig {
            source: DataSource::Phantom {
                n_patients: 40,
                prevalence: 0.5,
                seed: 2,
                phantom: Default::default(),
            },
            healthy_per_image: 1,
            ..DataConfig::default()
        },
        singan: SinGANConfig {
            max_dim: 25,
            epochs: 2,
            iterations_per_epoch: 1,
            ..SinGANConfig::default()
        },
        cells,
        ..GridConfig::default()
    };
    grid.defaults.train_config = TrainConfig {
        epochs: 3,
        batch_size: 32,
        ..TrainConfig::default()
    };
    grid
}

fn ensemble_contract() -> Outcome {
    let patches: Vec<LesionPatch> = generate_phantom_dataset(4, 1.0, 8)
        .iter()
        .flat_map(|r| extract_lesion_patches(r, &[ZoomGroup::G1]).unwrap())
        .collect();
    let members: Vec<ClassifierModel> = (1..=4).map(|s| build_classifier(3, &BackboneSpec::default(), s).unwrap()).collect();
    let each: Vec<Vec<Vec<f64>>> = members.iter().map(|m| m.predict_proba(&patches).unwrap()).collect();
    let single = ensemble_predict(&EnsemblePredictor::new(vec![members[0].clone()]).map_err(err)?, &patches).map_err(err)?;
    ensure(single == each[0], || "singleton ensemble differs from its member".into())?;
    let forward = ensemble_predict(&EnsemblePredictor::new(members.clone()).map_err(err)?, &patches).map_err(err)?;
    let mut shuffled = members.clone();
    shuffled.swap(0, 3);
    shuffled.swap(1, 2);
    let permuted = ensemble_predict(&EnsemblePredictor::new(shuffled).map_err(err)?, &patches).map_err(err)?;
    ensure(forward == permuted, || "member order changes ensemble scores".into())?;
    for (i, row) in forward.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let oracle = each.iter().map(|m| m[i][c]).sum::<f64>() / 4.0;
            ensure((v - oracle).abs() < 1e-12, || format!("sample {i} class {c}: {v} vs mean {oracle}"))?;
        }
    }

    let mut combined = CellSpec::new("G3->G1 combined", &[ZoomGroup::G3], &[ZoomGroup::G1]);
    combined.ensemble = true;
    combined.augmentation = Augmentation::Combined {
        n_models: 1,
        source_image_ids: Vec::new(),
    };
    let mut grid = small_grid(vec![combined]);
    grid.defaults.split_mode = SplitMode::FixedTest;
    let ctx = ExperimentContext::new(grid).map_err(err)?;
    let report = ctx.run_cell(&ctx.grid.resolved_cells()[0]).map_err(err)?;
    let note = "ensemble of 6 members per seed";
    ensure(report.notes.iter().any(|n| n == note), || format!("combined notes {:?}", report.notes))?;
    Ok(format!("identity, permutation and mean verified; combined regime: {note}"))
}

fn shift_grid() -> Result<(GridConfig, PathBuf), String> {
    let mut grid = GridConfig {
        name: "annotation-shift".into(),
        cells: shift_grid_cells(),
        ..GridConfig::default()
    };
    grid.defaults.train_config.epochs = 20;
    Ok((grid, out_dir("shift")))
}

fn annotation_shift() -> Outcome {
    let (grid, dir) = shift_grid()?;
    let ctx = ExperimentContext::new(grid).map_err(err)?;
    let cells = ctx.grid.resolved_cells();
    let opts = RunOptions {
        workers: 1,
        out_dir: Some(dir.clone()),
        max_new_cells: None,
    };
    let r = reports(run_cells(&ctx, &cells, &opts).map_err(err)?)?;
    let (g1g1, g1g3) = (malignant(&r, "G1->G1")?, malignant(&r, "G1->G3")?);
    ensure(g1g1 >= g1g3 + 0.05, || format!("G1->G1 {g1g1:.3} vs G1->G3 {g1g3:.3}"))?;
    let all = malignant(&r, "all->all")?;
    let mut singles = Vec::new();
    for g in ZoomGroup::ALL {
        let v = malignant(&r, &format!("{g}->all"))?;
        ensure(all > v, || format!("all->all {all:.3} does not beat {g}->all {v:.3}"))?;
        singles.push(format!("{g} {v:.3}"));
    }
    Ok(format!(
        "malignant AUC G1->G1 {g1g1:.3}, G1->G3 {g1g3:.3}; all->all {all:.3} vs {}; output {}",
        singles.join(", "),
        dir.display()
    ))
}

fn augmentation_trend() -> Outcome {
    let mut grid = GridConfig {
        name: "augmentation".into(),
        cells: augmentation_study_cells(&[0, 1, 2, 4]),
        ..GridConfig::default()
    };
    grid.defaults.seeds = vec![0, 1, 2];
    grid.defaults.train_config.epochs = 20;
    let dir = out_dir("augmentation");
    let ctx = ExperimentContext::new(grid).map_err(err)?.with_singan_cache(Some(dir.join("singan")));
    let cells = ctx.grid.resolved_cells();

    // identical synthetic totals for 1, 2 and 4 models on every fold
    let splits = ctx.splits(cells[0].split_mode).map_err(err)?;
    let mut totals = Vec::new();
    for fold in 0..splits.len() {
        let train = ctx.indices(&splits[fold], Partition::Train, &[ZoomGroup::G3]);
        let deficit = label_deficit(train.iter().map(|&i| ctx.pool[i].class_label), ClassLabel::Malignant);
        let mut counts = Vec::new();
        for n in [1, 2, 4] {
            let aug = Augmentation::Singan {
                n_models: n,
                source_image_ids: Vec::new(),
            };
            let sources = ctx.source_patches(&aug, &splits, fold).map_err(err)?;
            let models = sources.iter().map(|&i| ctx.singan_for(i)).collect::<zoomshift::Result<Vec<_>>>().map_err(err)?;
            let ids: Vec<String> = sources.iter().map(|&i| ctx.pool[i].patch_id.clone()).collect();
            let synth_sources: Vec<SyntheticSource<'_>> = sources
                .iter()
                .zip(&models)
                .zip(&ids)
                .map(|((&i, m), id)| SyntheticSource {
                    model_id: id,
                    patient_id: &ctx.pool[i].patient_id,
                    model: m,
                })
                .collect();
            counts.push(generate_synthetic(&synth_sources, ClassLabel::Malignant, deficit, 1).map_err(err)?.len());
        }
        ensure(counts.iter().all(|&c| c == deficit), || format!("fold {fold}: totals {counts:?}, deficit {deficit}"))?;
        totals.push(deficit);
    }

    let opts = RunOptions {
        workers: 1,
        out_dir: Some(dir.clone()),
        max_new_cells: None,
    };
    let r = reports(run_cells(&ctx, &cells, &opts).map_err(err)?)?;
    let aucs: Vec<f64> = [0, 1, 2, 4]
        .iter()
        .map(|n| malignant(&r, &format!("G3->G1 singan-{n}")))
        .collect::<Result<_, _>>()?;
    let gain = aucs[3] - aucs[0];
    ensure(gain >= 0.03, || format!("gain {gain:.3} (malignant AUC by n_models 0/1/2/4: {aucs:.3?})"))?;
    Ok(format!(
        "malignant AUC by n_models 0/1/2/4: {aucs:.3?}, gain {gain:.3}; synthetic totals per fold {totals:?}"
    ))
}

fn determinism_and_resume() -> Outcome {
    let mut cells = augmentation_study_cells(&[0, 2]);
    cells.push(CellSpec::new("G1->G3", &[ZoomGroup::G1], &[ZoomGroup::G3]));
    let mut combined = CellSpec::new("G3->G1 combined", &[ZoomGroup::G3], &[ZoomGroup::G1]);
    combined.ensemble = true;
    combined.split_mode = Some(SplitMode::FixedTest);
    combined.augmentation = Augmentation::Combined {
        n_models: 1,
        source_image_ids: Vec::new(),
    };
    cells.push(combined);
    let grid = small_grid(cells);
    let n_cells = grid.cells.len();
    let run = |dir: &Path, workers: usize, limit: Option<usize>| -> Result<Vec<CellOutcome>, String> {
        // a fresh context per run, so nothing is shared through memory
        let ctx = ExperimentContext::new(grid.clone()).map_err(err)?;
        let opts = RunOptions {
            workers,
            out_dir: Some(dir.to_path_buf()),
            max_new_cells: limit,
        };
        run_cells(&ctx, &ctx.grid.resolved_cells(), &opts).map_err(err)
    };
    let results = |dir: &Path| std::fs::read(dir.join("results.csv")).map_err(err);

    let (a, b, c) = (out_dir("repeat-a"), out_dir("repeat-b"), out_dir("resume"));
    reports(run(&a, 1, None)?)?;
    reports(run(&b, 2, None)?)?;
    ensure(results(&a)? == results(&b)?, || "re-run results.csv differs".into())?;

    let partial = run(&c, 1, Some(2))?;
    let done = partial.iter().filter(|o| o.report.is_some()).count();
    ensure(done == 2, || format!("interrupted run finished {done} cells"))?;
    let resumed = run(&c, 1, None)?;
    let reused = resumed.iter().filter(|o| o.resumed).count();
    ensure(reused == 2, || format!("resume reused {reused} cells"))?;
    reports(resumed)?;
    ensure(results(&c)? == results(&a)?, || "resumed results.csv differs".into())?;
    Ok(format!("{n_cells}-cell pipeline bit-identical across re-runs, worker counts and resume"))
}

fn criteria() -> Vec<Criterion> {
    let min = |m: u64| Duration::from_secs(60 * m);
    vec![
        Criterion { id: 1, name: "structural fidelity", budget: min(1), run: structural_fidelity },
        Criterion { id: 2, name: "geometry and leakage", budget: min(1), run: geometry_suite },
        Criterion { id: 3, name: "loss oracles", budget: min(2), run: loss_oracles },
        Criterion { id: 4, name: "SinGAN smoke test", budget: min(15), run: singan_smoke },
        Criterion { id: 5, name: "metric oracles", budget: min(2), run: metric_oracles },
        Criterion { id: 6, name: "annotation-shift trend", budget: min(30), run: annotation_shift },
        Criterion { id: 7, name: "augmentation trend", budget: min(45), run: augmentation_trend },
        Criterion { id: 8, name: "ensemble contract", budget: min(1), run: ensemble_contract },
        Criterion { id: 9, name: "determinism and resume", budget: min(10), run: determinism_and_resume },
    ]
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ZOOMSHIFT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for c in criteria() {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let timing = format!("{:.1} s, budget {} s", elapsed.as_secs_f64(), c.budget.as_secs());
        let (pass, detail) = match outcome {
            Ok(d) if elapsed <= c.budget => (true, d),
            Ok(d) => (false, format!("over budget; {d}")),
            Err(e) => (false, e),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {} {} [{}] ({timing}): {detail}", c.id, if pass { "PASS" } else { "FAIL" }, c.name);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

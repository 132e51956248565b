//! SiFID, accuracy, one-vs-rest ROC-AUC and fold aggregation.

mod report;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::{Backbone, FeatureMap};
use crate::dataset::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::imageops::{resize, GrayImage};

pub use report::{group_label, write_results_csv, FoldMetrics, MetricsReport, RESULTS_HEADER};

/// Negative eigenvalues down to this (relative) magnitude are treated as zero.
const PSD_TOLERANCE: f64 = 1e-8;

/// Mean and covariance of feature vectors taken over spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_locations: usize,
}

impl FeatureStats {
    /// Statistics of a channel-major feature map with an `n - 1` covariance denominator.
    pub fn from_map(map: &FeatureMap) -> Result<Self> {
        let (c, n) = (map.channels, map.positions);
        if n < 2 || map.data.len() != c * n {
            return Err(Error::Shape(format!("feature map with {n} positions over {c} channels")));
        }
        let x = DMatrix::from_fn(c, n, |i, j| map.data[i * n + j] as f64);
        let mean = x.column_mean();
        let centred = DMatrix::from_fn(c, n, |i, j| x[(i, j)] - mean[i]);
        let mut cov = &centred * centred.transpose() / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(FeatureStats {
            mean,
            cov,
            n_locations: n,
        })
    }
}

fn clipped_eigenvalues(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if !v.is_finite() || *v < -PSD_TOLERANCE * scale {
            return Err(Error::Numerical(format!("{what} is not positive semi-definite (eigenvalue {v:e})")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `|mu_a - mu_b|^2 + Tr(C_a + C_b - 2 (C_a C_b)^(1/2))`.
///
/// The trace of the square root is taken as the sum of square roots of the
/// eigenvalues of `S C_b S` with `S = C_a^(1/2)`, which shares its spectrum
/// with `C_a C_b`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.cov.shape() != b.cov.shape() || a.cov.nrows() != a.mean.len() {
        return Err(Error::Shape("feature statistics have different dimensions".into()));
    }
    let eig = clipped_eigenvalues(&a.cov, "first covariance")?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    let inner = clipped_eigenvalues(&(&s * &b.cov * &s), "covariance product")?;
    let tr_sqrt: f64 = inner.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::Numerical("non-finite Frechet distance".into()));
    }
    Ok(d.max(0.0))
}

fn to_input_size(img: &GrayImage) -> GrayImage {
    if img.dim() == (PATCH_SIZE, PATCH_SIZE) {
        img.clone()
    } else {
        resize(img, PATCH_SIZE, PATCH_SIZE)
    }
}

/// Early-layer feature statistics of one image, resized to the extractor's input size.
pub fn image_stats(img: &GrayImage, backbone: &dyn Backbone) -> Result<FeatureStats> {
    FeatureStats::from_map(&backbone.early_features(&to_input_size(img))?)
}

/// Single-image FID between a real and a synthetic image.
pub fn sifid(real: &GrayImage, fake: &GrayImage, backbone: &dyn Backbone) -> Result<f64> {
    frechet_distance(&image_stats(real, backbone)?, &image_stats(fake, backbone)?)
}

/// Fraction of exact matches.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("accuracy of zero samples".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Area under the ROC curve of `scores` for the positives, with ties counted as
/// one half (Mann-Whitney statistic via midranks).
pub fn roc_auc(scores: &[f64], positive: &[bool], class: &str) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc { class: class.into() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ranks are 1-based; doubled so tied midranks stay integral
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_midrank = (i + 1 + j + 1) as u64;
        doubled_rank_sum += doubled_midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        i = j + 1;
    }
    let doubled_u = doubled_rank_sum - (n_pos * (n_pos + 1)) as u64;
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// One-vs-rest AUC per class; `scores[i][c]` ranks sample `i` for class `c`.
pub fn roc_auc_ovr(scores: &[Vec<f64>], labels: &[usize], class_names: &[String]) -> Result<BTreeMap<String, f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.len() != class_names.len()) {
        return Err(Error::Shape(format!("score vectors must have {} entries", class_names.len())));
    }
    class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            Ok((name.clone(), roc_auc(&col, &pos, name)?))
        })
        .collect()
}

/// Mean with sample standard deviation over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// A single value has no spread; its SD is reported as zero.
    pub fn is_degenerate(&self) -> bool {
        self.n < 2
    }
}

pub fn aggregate_folds(values: &[f64]) -> Result<MeanSd> {
    if values.is_empty() {
        return Err(Error::EmptyInput("no fold values to aggregate".into()));
    }
    let n = values.len();
    // summing in sorted order makes the result independent of fold order
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(MeanSd { mean, sd, n })
}

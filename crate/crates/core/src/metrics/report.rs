use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{aggregate_folds, MeanSd};
use crate::dataset::{ClassLabel, ZoomGroup};
use crate::error::{IoContext, Result};

/// Evaluation of one fold (or seed) of an experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub auc: BTreeMap<String, f64>,
}

/// Fold-aggregated metrics of one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cell: String,
    pub train_groups: Vec<ZoomGroup>,
    pub test_groups: Vec<ZoomGroup>,
    pub augmentation: String,
    pub n_folds: usize,
    pub overall_accuracy: MeanSd,
    pub auc_per_class: BTreeMap<String, MeanSd>,
    pub folds: Vec<FoldMetrics>,
    pub config_fingerprint: String,
    pub backbone: String,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn from_folds(
        cell: impl Into<String>,
        train_groups: Vec<ZoomGroup>,
        test_groups: Vec<ZoomGroup>,
        augmentation: impl Into<String>,
        folds: Vec<FoldMetrics>,
        config_fingerprint: impl Into<String>,
        backbone: impl Into<String>,
    ) -> Result<Self> {
        let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let overall_accuracy = aggregate_folds(&acc)?;
        let mut auc_per_class = BTreeMap::new();
        if let Some(first) = folds.first() {
            for class in first.auc.keys() {
                let vals: Vec<f64> = folds.iter().filter_map(|f| f.auc.get(class).copied()).collect();
                auc_per_class.insert(class.clone(), aggregate_folds(&vals)?);
            }
        }
        let mut notes = Vec::new();
        if overall_accuracy.is_degenerate() {
            notes.push("single fold: standard deviations reported as 0".to_string());
        }
        Ok(MetricsReport {
            cell: cell.into(),
            train_groups,
            test_groups,
            augmentation: augmentation.into(),
            n_folds: folds.len(),
            overall_accuracy,
            auc_per_class,
            folds,
            config_fingerprint: config_fingerprint.into(),
            backbone: backbone.into(),
            notes,
        })
    }

    pub fn auc(&self, class: &str) -> Option<MeanSd> {
        self.auc_per_class.get(class).copied()
    }

    fn csv_row(&self) -> Vec<String> {
        let mut row = vec![
            self.cell.clone(),
            group_label(&self.train_groups),
            group_label(&self.test_groups),
            self.augmentation.clone(),
            fmt(self.overall_accuracy.mean),
            fmt(self.overall_accuracy.sd),
        ];
        for class in ClassLabel::ORDER {
            match self.auc(class.name()) {
                Some(m) => row.extend([fmt(m.mean), fmt(m.sd)]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        row.push(self.n_folds.to_string());
        row.push(self.config_fingerprint.clone());
        row
    }
}

/// `G1`, `G1+G3`, or `all` for the full set.
pub fn group_label(groups: &[ZoomGroup]) -> String {
    if groups.len() == ZoomGroup::ALL.len() {
        return "all".into();
    }
    groups.iter().map(|g| g.to_string()).collect::<Vec<_>>().join("+")
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub const RESULTS_HEADER: [&str; 14] = [
    "cell",
    "train_group",
    "test_group",
    "augmentation",
    "accuracy_mean",
    "accuracy_sd",
    "auc_healthy_mean",
    "auc_healthy_sd",
    "auc_benign_mean",
    "auc_benign_sd",
    "auc_malignant_mean",
    "auc_malignant_sd",
    "n_folds",
    "config_fingerprint",
];

pub fn write_results_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in reports {
        w.write_record(r.csv_row())?;
    }
    w.flush().at(path)
}

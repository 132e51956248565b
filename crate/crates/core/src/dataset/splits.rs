//! Patient-wise train/validation/test splits by greedy bin packing.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::MammogramRecord;
use crate::error::{Error, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Each fold tests on a disjoint group of patients.
    RotatingTest,
    /// One test group shared by all folds; only train/val rotate.
    FixedTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.63,
            val: 0.27,
            test: 0.10,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| !(f > 0.0 && f < 1.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub fold_id: usize,
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn partition_of(&self, patient_id: &str) -> Option<Partition> {
        self.assignment.get(patient_id).copied()
    }

    pub fn patients(&self, partition: Partition) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &p)| p == partition)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Fraction of samples in each partition, `[train, val, test]`.
    pub fn sample_fractions(&self, counts: &BTreeMap<String, usize>) -> [f64; 3] {
        let mut totals = [0usize; 3];
        for (pid, &n) in counts {
            if let Some(p) = self.partition_of(pid) {
                totals[p as usize] += n;
            }
        }
        let sum = totals.iter().sum::<usize>().max(1) as f64;
        totals.map(|t| t as f64 / sum)
    }
}

/// Number of records per patient.
pub fn patient_sample_counts(records: &[MammogramRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.patient_id.clone()).or_insert(0) += 1;
    }
    counts
}

/// Splits patients so that per-fold image counts approach `fractions`.
pub fn make_splits(
    records: &[MammogramRecord],
    n_folds: usize,
    fractions: SplitFractions,
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<SplitAssignment>> {
    make_splits_by_counts(&patient_sample_counts(records), n_folds, fractions, mode, seed)
}

/// Patients in shuffled order, then stably sorted largest first.
fn packing_order<'a>(patients: &[(&'a str, usize)], seed: u64, stream: u64) -> Vec<(&'a str, usize)> {
    let mut order = patients.to_vec();
    order.shuffle(&mut rng_for(seed, &[stream]));
    order.sort_by(|a, b| b.1.cmp(&a.1));
    order
}

/// Same as [`make_splits`] but over arbitrary per-patient sample counts
/// (for example patch counts rather than image counts).
pub fn make_splits_by_counts(
    counts: &BTreeMap<String, usize>,
    n_folds: usize,
    fractions: SplitFractions,
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<SplitAssignment>> {
    fractions.validate()?;
    let n_patients = counts.len();
    let n_test_bins = match mode {
        SplitMode::RotatingTest => n_folds,
        SplitMode::FixedTest => 1,
    };
    // every fold needs a nonempty train, val and test group
    let needed = match mode {
        SplitMode::RotatingTest => n_folds.max(3),
        SplitMode::FixedTest => 3,
    };
    if n_folds == 0 || n_patients < needed {
        return Err(Error::TooFewPatients {
            patients: n_patients,
            folds: n_folds,
        });
    }
    let patients: Vec<(&str, usize)> = counts.iter().map(|(k, &v)| (k.as_str(), v)).collect();
    let total: usize = patients.iter().map(|p| p.1).sum();
    let test_target = fractions.test * total as f64;

    // Test bins: each patient goes to the bin with the largest deficit when that
    // brings the bin closer to its target; bins are kept nonempty.
    let mut bins: Vec<(Vec<&str>, usize)> = vec![(Vec::new(), 0); n_test_bins];
    let mut pool = Vec::new();
    // leave room for nonempty train/val and for any still-empty bins
    let max_test_patients = n_patients.saturating_sub(2 + n_test_bins);
    let mut assigned = 0;
    for (pid, n) in packing_order(&patients, seed, 0) {
        let (idx, deficit) = bins
            .iter()
            .enumerate()
            .map(|(i, b)| (i, test_target - b.1 as f64))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if assigned < max_test_patients && (n as f64) <= 2.0 * deficit {
            bins[idx].0.push(pid);
            bins[idx].1 += n;
            assigned += 1;
        } else {
            pool.push((pid, n));
        }
    }
    for b in 0..n_test_bins {
        if bins[b].0.is_empty() {
            // smallest remaining patient keeps the bin nonempty
            let (i, _) = pool.iter().enumerate().min_by_key(|(_, p)| p.1).unwrap();
            let (pid, n) = pool.remove(i);
            bins[b].0.push(pid);
            bins[b].1 += n;
        }
    }

    let mut folds = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let test_bin = if mode == SplitMode::RotatingTest { fold } else { 0 };
        let test: BTreeSet<&str> = bins[test_bin].0.iter().copied().collect();
        let rest: Vec<(&str, usize)> = patients.iter().filter(|p| !test.contains(p.0)).copied().collect();
        let rest_total: usize = rest.iter().map(|p| p.1).sum();
        let val_target = fractions.val * total as f64;
        let train_target = rest_total as f64 - val_target;

        let mut assignment: BTreeMap<String, Partition> =
            test.iter().map(|p| (p.to_string(), Partition::Test)).collect();
        let (mut train_n, mut val_n) = (0usize, 0usize);
        let order = packing_order(&rest, seed, fold as u64 + 1);
        for (pid, n) in &order {
            let train_def = (train_target - train_n as f64) / train_target.max(1.0);
            let val_def = (val_target - val_n as f64) / val_target.max(1.0);
            let p = if val_def > train_def { Partition::Val } else { Partition::Train };
            match p {
                Partition::Val => val_n += n,
                _ => train_n += n,
            }
            assignment.insert(pid.to_string(), p);
        }
        for needed in [Partition::Val, Partition::Train] {
            if !assignment.values().any(|&p| p == needed) {
                let donor = if needed == Partition::Val { Partition::Train } else { Partition::Val };
                let (pid, _) = order
                    .iter()
                    .rev()
                    .find(|(pid, _)| assignment[*pid] == donor)
                    .expect("at least two non-test patients");
                assignment.insert(pid.to_string(), needed);
            }
        }
        folds.push(SplitAssignment {
            fold_id: fold,
            assignment,
        });
    }
    Ok(folds)
}

//! Head training: Adam with a step learning-rate schedule and best-validation
//! checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use zoomshift_tensor::Adam;

use super::head::LinearHead;
use crate::dataset::WeightedSampler;
use crate::error::{Error, IoContext, Result};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            lr_step: 5,
            lr_gamma: 0.1,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_step == 0 {
            return Err(Error::Config("epochs, batch_size and lr_step must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_gamma > 0.0) {
            return Err(Error::Config("lr and lr_gamma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().at(path)
    }
}

/// Index of the smallest validation loss; ties go to the earlier epoch.
pub fn select_best_epoch(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Labelled feature vectors with optional per-sample sampling weights.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSet<'a> {
    pub features: &'a [&'a [f32]],
    pub labels: &'a [usize],
    pub weights: Option<&'a [f64]>,
}

impl FeatureSet<'_> {
    fn check(&self, what: &str, dim: usize, num_classes: usize) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::EmptyInput(format!("{what} set")));
        }
        if self.features.len() != self.labels.len() || self.weights.is_some_and(|w| w.len() != self.labels.len()) {
            return Err(Error::Shape(format!("{what} features, labels and weights differ in length")));
        }
        if self.features.iter().any(|f| f.len() != dim) {
            return Err(Error::Shape(format!("{what} features must have {dim} entries")));
        }
        if self.labels.iter().any(|&y| y >= num_classes) {
            return Err(Error::Shape(format!("{what} label outside 0..{num_classes}")));
        }
        Ok(())
    }
}

/// Trains `head` on precomputed features and returns the head from the epoch
/// with the lowest validation loss.
///
/// Without training weights each epoch visits a fresh permutation; with
/// weights it draws as many samples as the set holds, with replacement.
/// Validation loss is the weighted mean when validation weights are given.
pub fn train_head(
    head: &LinearHead,
    train: FeatureSet<'_>,
    val: FeatureSet<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LinearHead, TrainingHistory)> {
    cfg.validate()?;
    train.check("train", head.dim, head.num_classes)?;
    val.check("validation", head.dim, head.num_classes)?;
    let sampler = train.weights.map(WeightedSampler::new).transpose()?;
    let mut rng = rng_for(seed, &[0x7a1]);
    let mut adam = Adam::<f64>::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut current = head.clone();
    let mut best = head.clone();
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let n = train.labels.len();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let order: Vec<usize> = match &sampler {
            Some(s) => s.draw(&mut rng, n),
            None => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx
            }
        };
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let feats: Vec<&[f32]> = batch.iter().map(|&i| train.features[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grad) = current.loss_and_grad(&feats, &labels, None);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    stage: format!("classifier epoch {epoch}"),
                });
            }
            total += loss * batch.len() as f64;
            let LinearHead { weight, bias, .. } = &mut current;
            adam.step(&mut [weight.as_mut_slice(), bias.as_mut_slice()], &[&grad.weight, &grad.bias]);
        }
        let val_loss = current.loss(val.features, val.labels, val.weights);
        let train_loss = total / n as f64;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                stage: format!("classifier epoch {epoch}"),
            });
        }
        if records.iter().all(|r| val_loss < r.val_loss) {
            best = current.clone();
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
        });
    }
    let val_losses: Vec<f64> = records.iter().map(|r| r.val_loss).collect();
    let best_epoch = select_best_epoch(&val_losses).expect("at least one epoch");
    Ok((best, TrainingHistory { records, best_epoch }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_steps_every_five_epochs() {
        let cfg = TrainConfig::default();
        for (e, lr) in [(0, 1e-2), (4, 1e-2), (5, 1e-3), (10, 1e-4)] {
            assert!((cfg.lr_at(e) - lr).abs() < 1e-15, "epoch {e}");
        }
    }

    #[test]
    fn best_epoch_is_first_minimum() {
        assert_eq!(select_best_epoch(&[0.9, 0.4, 0.6]), Some(1));
        assert_eq!(select_best_epoch(&[0.5, 0.3, 0.3]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
    }
}

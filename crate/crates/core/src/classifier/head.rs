//! Affine head with independent per-class sigmoid outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major `[num_classes, dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against target `y`, evaluated stably.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    /// Uniform init in `[-1/sqrt(dim), 1/sqrt(dim)]` for weights and bias.
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x4ead]);
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>();
        let weight = draw(num_classes * dim);
        let bias = draw(num_classes);
        LinearHead {
            num_classes,
            dim,
            weight,
            bias,
        }
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        LinearHead {
            num_classes,
            dim,
            weight: vec![0.0; num_classes * dim],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.num_classes)
            .map(|k| {
                let row = &self.weight[k * self.dim..(k + 1) * self.dim];
                self.bias[k] + row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>()
            })
            .collect()
    }

    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        self.logits(x).into_iter().map(sigmoid).collect()
    }

    /// Loss of one batch: per-sample mean over classes, then a weighted mean
    /// over samples (plain mean when `weights` is `None`).
    pub fn loss(&self, feats: &[&[f32]], labels: &[usize], weights: Option<&[f64]>) -> f64 {
        let (norm, w) = sample_weights(feats.len(), weights);
        feats
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (x, &y))| {
                let per: f64 = self
                    .logits(x)
                    .iter()
                    .enumerate()
                    .map(|(k, &z)| bce_with_logits(z, (k == y) as u8 as f64))
                    .sum();
                w(i) * per / self.num_classes as f64
            })
            .sum::<f64>()
            / norm
    }

    /// Loss and its analytic gradient with respect to weight and bias.
    pub fn loss_and_grad(&self, feats: &[&[f32]], labels: &[usize], weights: Option<&[f64]>) -> (f64, HeadGrad) {
        let (norm, w) = sample_weights(feats.len(), weights);
        let k_n = self.num_classes as f64;
        let mut grad = HeadGrad {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        };
        let mut loss = 0.0;
        for (i, (x, &y)) in feats.iter().zip(labels).enumerate() {
            let scale = w(i) / (norm * k_n);
            for (k, z) in self.logits(x).into_iter().enumerate() {
                let t = (k == y) as u8 as f64;
                loss += scale * bce_with_logits(z, t);
                let dz = scale * (sigmoid(z) - t);
                grad.bias[k] += dz;
                let row = &mut grad.weight[k * self.dim..(k + 1) * self.dim];
                row.iter_mut().zip(x.iter()).for_each(|(g, &v)| *g += dz * v as f64);
            }
        }
        (loss, grad)
    }
}

fn sample_weights(n: usize, weights: Option<&[f64]>) -> (f64, impl Fn(usize) -> f64 + '_) {
    let norm = match weights {
        Some(w) => w.iter().sum(),
        None => n as f64,
    };
    (norm, move |i| weights.map_or(1.0, |w| w[i]))
}

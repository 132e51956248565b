//! Inverse-class-frequency sampling weights.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

/// Weight of sample `i` is `1 / count(labels[i])`, so every class carries
/// total weight 1. Every class in `0..num_classes` must be present.
pub fn weighted_sampler_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::DegenerateLabels("no labels".into()));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::DegenerateLabels(format!(
                "label {l} outside 0..{num_classes}"
            )));
        }
        counts[l] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::DegenerateLabels(format!("class {missing} has no samples")));
    }
    Ok(labels.iter().map(|&l| 1.0 / counts[l] as f64).collect())
}

/// Draws sample indices with replacement, proportionally to weights.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let dist = WeightedIndex::new(weights)
            .map_err(|e| Error::DegenerateLabels(format!("invalid sampling weights: {e}")))?;
        Ok(WeightedSampler { dist })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.dist.sample(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    #[test]
    fn balanced_labels_equal_weights() {
        let w = weighted_sampler_weights(&[0, 1, 2, 0, 1, 2], 3).unwrap();
        assert!(w.iter().all(|&x| x == w[0]));
    }

    #[test]
    fn monte_carlo_frequency() {
        let labels = [0, 0, 0, 1];
        let w = weighted_sampler_weights(&labels, 2).unwrap();
        assert_eq!(w, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0]);
        let sampler = WeightedSampler::new(&w).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let draws = sampler.draw(&mut rng, 100_000);
        let frac_a = draws.iter().filter(|&&i| labels[i] == 0).count() as f64 / 1e5;
        assert!((frac_a - 0.5).abs() < 0.01, "{frac_a}");
    }

    #[test]
    fn skewed_class_counts_are_balanced() {
        let mut labels = vec![0; 2456];
        labels.extend(vec![1; 699]);
        labels.extend(vec![2; 285]);
        let w = weighted_sampler_weights(&labels, 3).unwrap();
        let total: f64 = w.iter().sum();
        for c in 0..3 {
            let mass: f64 = labels.iter().zip(&w).filter(|(&l, _)| l == c).map(|(_, &x)| x).sum();
            assert!((mass / total - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(weighted_sampler_weights(&[], 3), Err(Error::DegenerateLabels(_))));
        assert!(matches!(weighted_sampler_weights(&[0, 0, 1], 3), Err(Error::DegenerateLabels(_))));
    }

    proptest! {
        #[test]
        fn class_mass_is_one(counts in proptest::collection::vec(1usize..40, 1..6), seed in any::<u64>()) {
            let k = counts.len();
            let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
            labels.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let w = weighted_sampler_weights(&labels, k).unwrap();
            for c in 0..k {
                let mass: f64 = labels.iter().zip(&w).filter(|(&l, _)| l == c).map(|(_, &x)| x).sum();
                prop_assert!((mass - 1.0).abs() < 1e-9);
            }
        }
    }
}

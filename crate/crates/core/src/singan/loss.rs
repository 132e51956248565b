//! WGAN-GP critic objective and reconstruction error.

use rand::Rng;
use serde::{Deserialize, Serialize};
use zoomshift_tensor::{grad, Float, Tensor};

use super::network::BoundNet;
use crate::seeding::rng_for;

/// A patch critic: maps a `[B, C, H, W]` batch to a `[B, ...]` map of
/// local scores. The scalar score of a sample is the mean of its map.
pub trait Critic<T: Float> {
    fn score_map(&self, x: &Tensor<T>) -> Tensor<T>;

    fn score(&self, x: &Tensor<T>) -> Tensor<T> {
        self.score_map(x).mean_per_sample()
    }
}

impl<T: Float> Critic<T> for BoundNet<T> {
    fn score_map(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward(x)
    }
}

/// How the gradient-penalty norm is taken over the critic's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyNorm {
    /// `|grad f(x_hat)|` over the whole sample, with `f` the mean score.
    Sample,
    /// Gradient of the summed score map, normed over channels at each pixel
    /// and averaged over pixels, as in the reference SinGAN code.
    #[default]
    Pixel,
}

/// `E[f(fake)] - E[f(real)] + lambda * E[(|grad f(x_hat)| - 1)^2]` with
/// `x_hat = eps * real + (1 - eps) * fake`, `eps ~ U[0, 1)` per sample and
/// the norm taken over each whole sample.
pub fn critic_loss_wgan_gp<T: Float, C: Critic<T>>(
    critic: &C,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda: f64,
    seed: u64,
) -> Tensor<T> {
    critic_loss_wgan_gp_with(critic, real, fake, lambda, PenaltyNorm::Sample, seed)
}

/// [`critic_loss_wgan_gp`] with a choice of penalty norm.
///
/// Both batches are treated as constants; the result is differentiable with
/// respect to whatever trainable tensors the critic closes over.
pub fn critic_loss_wgan_gp_with<T: Float, C: Critic<T>>(
    critic: &C,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda: f64,
    norm: PenaltyNorm,
    seed: u64,
) -> Tensor<T> {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches differ in shape");
    let real = real.detach();
    let fake = fake.detach();
    let wasserstein = critic.score(&fake).mean().sub(&critic.score(&real).mean());
    if lambda == 0.0 {
        return wasserstein;
    }
    let shape = real.shape().to_vec();
    let batch = shape[0];
    let per = real.numel() / batch;
    let mut rng = rng_for(seed, &[]);
    let mut mixed = Vec::with_capacity(real.numel());
    for b in 0..batch {
        let eps = T::lit(rng.random::<f64>());
        let range = b * per..(b + 1) * per;
        for (&r, &f) in real.data()[range.clone()].iter().zip(&fake.data()[range]) {
            mixed.push(eps * r + (T::one() - eps) * f);
        }
    }
    let x_hat = Tensor::leaf(mixed, &shape);
    let norms = match norm {
        PenaltyNorm::Sample => {
            let g = grad(&critic.score(&x_hat).sum(), &[&x_hat], true).remove(0);
            g.square().sum_per_sample()
        }
        PenaltyNorm::Pixel => {
            let g = grad(&critic.score_map(&x_hat).sum(), &[&x_hat], true).remove(0);
            let mut pixel_shape = shape.clone();
            pixel_shape[1] = 1;
            g.square().sum_to(&pixel_shape)
        }
    }
    .offset(T::lit(1e-12))
    .sqrt();
    let penalty = norms.offset(-T::one()).square().mean().scale(T::lit(lambda));
    wasserstein.add(&penalty)
}

/// Mean squared error over all elements.
pub fn mse<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "mse operands differ in shape");
    a.sub(b).square().mean()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstantCritic(f64);
    impl Critic<f64> for ConstantCritic {
        fn score_map(&self, x: &Tensor<f64>) -> Tensor<f64> {
            Tensor::full(&[x.shape()[0], 1], self.0)
        }
    }

    #[test]
    fn constant_critic_costs_lambda() {
        let real = Tensor::new((0..32).map(|i| i as f64).collect(), &[2, 1, 4, 4]);
        let fake = Tensor::zeros(&[2, 1, 4, 4]);
        let loss = critic_loss_wgan_gp(&ConstantCritic(3.0), &real, &fake, 0.1, 5).item();
        assert!((loss - 0.1).abs() < 1e-5, "{loss}");
    }

    #[test]
    fn zero_lambda_identical_batches() {
        let x = Tensor::new((0..16).map(|i| (i as f64).sin()).collect(), &[1, 1, 4, 4]);
        assert_eq!(critic_loss_wgan_gp(&ConstantCritic(1.0), &x, &x, 0.0, 0).item(), 0.0);
    }
}

//! Oracles shared by the SinGAN tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomshift::dataset::{extract_lesion_patches, generate_phantom_dataset, BiopsyLabel, ZoomGroup};
use zoomshift::imageops::{resize, GrayImage};
use zoomshift::singan::*;
use zoomshift_tensor::{grad, Tensor};

pub fn phantom_patch(side: usize) -> GrayImage {
    let records = generate_phantom_dataset(12, 1.0, 3);
    let rec = records
        .iter()
        .find(|r| r.biopsy_label == BiopsyLabel::Malignant)
        .expect("phantom has a malignant lesion");
    let patch = extract_lesion_patches(rec, &[ZoomGroup::G1]).unwrap().remove(0);
    resize(&patch.pixels, side, side)
}


pub struct ConstantCritic(pub f64);

impl Critic<f64> for ConstantCritic {
    fn score_map(&self, x: &Tensor<f64>) -> Tensor<f64> {
        Tensor::full(&[x.shape()[0], 1], self.0)
    }
}

/// `f(x) = w · x` over a whole `[C, H, W]` sample.
pub struct LinearCritic {
    pub w: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Critic<f64> for LinearCritic {
    fn score_map(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let w = Tensor::new(self.w.clone(), &self.shape);
        let n = x.shape()[0];
        x.mul(&w).sum_per_sample().reshape(&[n, 1])
    }
}

pub fn batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
}

pub fn mean_image(t: &Tensor<f64>) -> Vec<f64> {
    let n = t.shape()[0];
    let per = t.numel() / n;
    (0..per)
        .map(|i| (0..n).map(|b| t.data()[b * per + i]).sum::<f64>() / n as f64)
        .collect()
}


pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central difference of `loss_of` along buffer `bi`, element `ei`.
pub fn central_difference(net: &ConvNet, loss_of: &impl Fn(&ConvNet, bool) -> (f64, Option<Vec<Vec<f64>>>), bi: usize, ei: usize, h: f32) -> f64 {
    let mut plus = net.clone();
    let mut minus = net.clone();
    let base = net.buffers()[bi][ei];
    plus.buffers_mut()[bi][ei] = base + h;
    minus.buffers_mut()[bi][ei] = base - h;
    // exact step after f32 rounding
    let step = (base + h) as f64 - (base - h) as f64;
    (loss_of(&plus, false).0 - loss_of(&minus, false).0) / step
}

/// Largest relative error between the analytic gradient and central
/// differences on eight random parameters of `net`, evaluated in f64.
///
/// LeakyReLU makes the loss piecewise smooth, and the gradient penalty is even
/// discontinuous where a pre-activation changes sign. A coordinate is only
/// compared when differences at `h` and `h / 2` agree, i.e. when no kink lies
/// inside the interval.
pub fn gradient_error(net: &ConvNet, loss_of: impl Fn(&ConvNet, bool) -> (f64, Option<Vec<Vec<f64>>>), seed: u64) -> f64 {
    let (_, analytic) = loss_of(net, true);
    let analytic = analytic.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = net.buffers().iter().map(|b| b.len()).collect();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    while checked < 8 {
        let bi = rng.random_range(0..sizes.len());
        let ei = rng.random_range(0..sizes[bi]);
        let coarse = central_difference(net, &loss_of, bi, ei, 2e-5);
        let fine = central_difference(net, &loss_of, bi, ei, 1e-5);
        if relative_error(coarse, fine) > 1e-4 {
            skipped += 1;
            assert!(skipped <= 16, "too many coordinates straddle a kink");
            continue;
        }
        worst = worst.max(relative_error(fine, analytic[bi][ei]));
        checked += 1;
    }
    worst
}

pub fn toy_tensors(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = |rng: &mut ChaCha8Rng| Tensor::new((0..1024).map(|_| rng.random_range(-1.0..1.0)).collect(), &[1, 1, 32, 32]);
    (t(&mut rng), t(&mut rng), t(&mut rng), t(&mut rng))
}

pub fn nets(seed: u64) -> (ConvNet, ConvNet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ConvNet::new(8, 5, 3, OutputActivation::Tanh, &mut rng);
    let d = ConvNet::new(8, 5, 3, OutputActivation::Linear, &mut rng);
    (g, d)
}


fn parameter_grads(loss: &Tensor<f64>, net: &BoundNet<f64>) -> Vec<Vec<f64>> {
    grad(loss, &net.parameters(), false).iter().map(|t| t.data().to_vec()).collect()
}

/// Gradient check of the generator objective at one scale.
pub fn generator_gradient_error(seed: u64) -> f64 {
    let (generator, critic) = nets(seed);
    let (real, z, prev, z_rec) = toy_tensors(seed + 1);
    let prev_rec = prev.scale(0.5);
    gradient_error(
        &generator,
        |g, want_grad| {
            let bound = g.bind::<f64>(want_grad);
            let frozen = critic.bind::<f64>(false);
            let loss = generator_step_loss(&bound, &frozen, 0.1, &z, &prev, &z_rec, &prev_rec, &real, 10.0);
            (loss.item(), want_grad.then(|| parameter_grads(&loss, &bound)))
        },
        seed + 2,
    )
}

/// Gradient check of the critic objective, gradient penalty included.
pub fn critic_gradient_error(norm: PenaltyNorm, seed: u64) -> f64 {
    let (_, critic) = nets(seed);
    let (real, fake, _, _) = toy_tensors(seed + 1);
    gradient_error(
        &critic,
        |d, want_grad| {
            let bound = d.bind::<f64>(want_grad);
            let loss = critic_step_loss(&bound, &real, &fake, 0.1, norm, seed + 2);
            (loss.item(), want_grad.then(|| parameter_grads(&loss, &bound)))
        },
        seed + 3,
    )
}

//! Coarse-to-fine training.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use zoomshift_tensor::{grad, no_grad, Adam, Float, Tensor};

use super::loss::{critic_loss_wgan_gp_with, mse, Critic, PenaltyNorm};
use super::network::{BoundNet, ConvNet, OutputActivation};
use super::pyramid::{build_pyramid, ScalePyramid};
use super::{
    generator_residual, image_to_tensor, run_chain, standard_normal, to_model_domain, NoiseSource,
    SinGANConfig, SinGANModel, SinGANScale,
};
use crate::error::{Error, Result};
use crate::imageops::{resize, GrayImage};
use crate::seeding::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleStats {
    pub index: usize,
    pub shape: (usize, usize),
    pub channels: usize,
    pub noise_amp: f32,
    /// Reconstruction MSE at this scale in `[0, 1]` units, before and after training.
    pub rec_mse_before: f64,
    pub rec_mse_after: f64,
    pub critic_updates: u64,
    pub generator_updates: u64,
    pub final_critic_loss: f64,
    pub final_generator_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedSinGAN {
    pub model: SinGANModel,
    pub pyramid: ScalePyramid,
    pub stats: Vec<ScaleStats>,
}

/// Critic objective for one step; generic so it can be checked in `f64`.
pub fn critic_step_loss<T: Float>(
    critic: &BoundNet<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda_gp: f64,
    norm: PenaltyNorm,
    seed: u64,
) -> Tensor<T> {
    critic_loss_wgan_gp_with(critic, real, fake, lambda_gp, norm, seed)
}

/// Generator objective `-E[f(G(z))] + alpha * MSE(G(z*), real)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_step_loss<T: Float>(
    generator: &BoundNet<T>,
    critic: &BoundNet<T>,
    noise_amp: f64,
    z: &Tensor<T>,
    prev: &Tensor<T>,
    z_rec: &Tensor<T>,
    prev_rec: &Tensor<T>,
    real: &Tensor<T>,
    alpha: f64,
) -> Tensor<T> {
    let fake = generator_residual(generator, noise_amp, z, prev);
    let adversarial = critic.score(&fake).mean().neg();
    if alpha == 0.0 {
        return adversarial;
    }
    let rec = generator_residual(generator, noise_amp, z_rec, prev_rec);
    adversarial.add(&mse(&rec, real).scale(T::lit(alpha)))
}

fn rmse(a: &GrayImage, b: &GrayImage) -> f64 {
    let n = a.len().max(1) as f64;
    (a.iter().zip(b.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n).sqrt()
}

fn upsampled_chain<R: Rng>(coarser: &[SinGANScale], shape: (usize, usize), noise: &mut NoiseSource<'_, R>) -> GrayImage {
    if coarser.is_empty() {
        Array2::zeros(shape)
    } else {
        resize(&run_chain(coarser, noise), shape.0, shape.1)
    }
}

fn apply_grads(net: &mut ConvNet, opt: &mut Adam, grads: &[Tensor<f32>]) {
    let g: Vec<Vec<f32>> = grads.iter().map(|t| t.to_f32()).collect();
    let g_refs: Vec<&[f32]> = g.iter().map(|v| v.as_slice()).collect();
    opt.step(&mut net.buffers_mut(), &g_refs);
}

fn check_finite(v: f64, index: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::TrainingDiverged {
            stage: format!("singan scale {index}"),
        })
    }
}

/// Trains the next scale on top of the frozen scales already in `model`.
///
/// `model.scales` is only read; the returned scale is appended by the caller.
pub fn train_scale(model: &SinGANModel, pyramid: &ScalePyramid, cfg: &SinGANConfig) -> Result<(SinGANScale, ScaleStats)> {
    cfg.validate()?;
    let level = model.scales.len();
    if level >= pyramid.len() {
        return Err(Error::Config(format!(
            "all {} pyramid levels are already trained",
            pyramid.len()
        )));
    }
    let started = Instant::now();
    let index = pyramid.len() - 1 - level;
    let real_img = to_model_domain(&pyramid.images[level]);
    let shape = real_img.dim();
    let mut rng: ChaCha8Rng = rng_for(cfg.seed, &[level as u64]);

    let channels = cfg.channels_at(level);
    let (mut generator, mut critic) = match model.scales.last() {
        Some(prev) if prev.generator.channels() == channels => (prev.generator.clone(), prev.critic.clone()),
        _ => (
            ConvNet::new(channels, cfg.n_blocks, cfg.kernel, OutputActivation::Tanh, &mut rng),
            ConvNet::new(channels, cfg.n_blocks, cfg.kernel, OutputActivation::Linear, &mut rng),
        ),
    };

    let coarser = &model.scales[..];
    let prev_rec_img = upsampled_chain::<ChaCha8Rng>(coarser, shape, &mut NoiseSource::Reconstruction);
    let (noise_amp, recon_noise) = if level == 0 {
        (1.0f32, standard_normal(&mut rng, shape))
    } else {
        ((cfg.noise_amp_init * rmse(&prev_rec_img, &real_img)) as f32, Array2::zeros(shape))
    };

    let real = image_to_tensor::<f32>(&real_img);
    let prev_rec = image_to_tensor::<f32>(&prev_rec_img);
    let z_rec = image_to_tensor::<f32>(&recon_noise);
    let rec_mse_of = |g: &ConvNet| -> f64 {
        no_grad(|| {
            let out = generator_residual(&g.bind::<f32>(false), noise_amp as f64, &z_rec, &prev_rec);
            // errors in [-1, 1] units are twice those in [0, 1] units
            mse(&out, &real).item() as f64 / 4.0
        })
    };
    let rec_mse_before = rec_mse_of(&generator);

    let mut opt_g = Adam::new(cfg.lr_generator, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(cfg.lr_critic, cfg.beta1, cfg.beta2);
    let total_iters = cfg.epochs * cfg.iterations_per_epoch;
    let decay_iter = (cfg.lr_decay_at * total_iters as f64).floor() as usize;
    let (mut last_d, mut last_g) = (f64::NAN, f64::NAN);
    let mut chain_rng: ChaCha8Rng = rng_for(cfg.seed, &[level as u64, 1]);

    for iter in 0..total_iters {
        if iter == decay_iter && decay_iter > 0 {
            opt_g.lr *= cfg.lr_decay_gamma;
            opt_d.lr *= cfg.lr_decay_gamma;
        }
        let z = image_to_tensor::<f32>(&standard_normal(&mut rng, shape));
        let mut prev = Tensor::<f32>::zeros(&[1, 1, shape.0, shape.1]);
        for j in 0..cfg.critic_steps {
            prev = image_to_tensor(&upsampled_chain(coarser, shape, &mut NoiseSource::Random(&mut chain_rng)));
            let fake = no_grad(|| generator_residual(&generator.bind::<f32>(false), noise_amp as f64, &z, &prev));
            let bound = critic.bind::<f32>(true);
            let seed = derive_seed(cfg.seed, &[level as u64, iter as u64, j as u64]);
            let loss = critic_step_loss(&bound, &real, &fake, cfg.lambda_gp, cfg.gp_norm, seed);
            last_d = check_finite(loss.item() as f64, index)?;
            let grads = grad(&loss, &bound.parameters(), false);
            apply_grads(&mut critic, &mut opt_d, &grads);
        }
        for _ in 0..cfg.generator_steps {
            let bound = generator.bind::<f32>(true);
            let frozen_critic = critic.bind::<f32>(false);
            let loss = generator_step_loss(
                &bound,
                &frozen_critic,
                noise_amp as f64,
                &z,
                &prev,
                &z_rec,
                &prev_rec,
                &real,
                cfg.alpha,
            );
            last_g = check_finite(loss.item() as f64, index)?;
            let grads = grad(&loss, &bound.parameters(), false);
            apply_grads(&mut generator, &mut opt_g, &grads);
        }
    }

    let stats = ScaleStats {
        index,
        shape,
        channels,
        noise_amp,
        rec_mse_before,
        rec_mse_after: rec_mse_of(&generator),
        critic_updates: opt_d.steps(),
        generator_updates: opt_g.steps(),
        final_critic_loss: last_d,
        final_generator_loss: last_g,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((
        SinGANScale {
            index,
            shape,
            generator,
            critic,
            noise_amp,
            recon_noise,
        },
        stats,
    ))
}

pub fn train_singan(image: &GrayImage, image_id: &str, cfg: &SinGANConfig) -> Result<TrainedSinGAN> {
    train_singan_with_progress(image, image_id, cfg, |_| {})
}

/// Trains every pyramid level coarse to fine, reporting each finished scale.
pub fn train_singan_with_progress(
    image: &GrayImage,
    image_id: &str,
    cfg: &SinGANConfig,
    mut on_scale: impl FnMut(&ScaleStats),
) -> Result<TrainedSinGAN> {
    cfg.validate()?;
    let pyramid = build_pyramid(image, cfg.scale_factor, cfg.min_dim, cfg.max_dim)?;
    let mut model = SinGANModel {
        scales: Vec::with_capacity(pyramid.len()),
        alpha: cfg.alpha,
        lambda_gp: cfg.lambda_gp,
        scale_factor: pyramid.effective_factor,
        training_image_id: image_id.to_string(),
        config: cfg.clone(),
    };
    let mut stats = Vec::with_capacity(pyramid.len());
    for _ in 0..pyramid.len() {
        let (scale, s) = train_scale(&model, &pyramid, cfg)?;
        log::debug!(
            "singan {image_id}: scale {} {:?} rec mse {:.5} -> {:.5} in {:.1}s",
            s.index,
            s.shape,
            s.rec_mse_before,
            s.rec_mse_after,
            s.seconds
        );
        on_scale(&s);
        model.scales.push(scale);
        stats.push(s);
    }
    Ok(TrainedSinGAN { model, pyramid, stats })
}

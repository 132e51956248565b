//! Single-image multi-scale GAN: a pyramid of residual generators and patch
//! critics trained coarse to fine with WGAN-GP and a reconstruction term.

mod checkpoint;
mod loss;
mod network;
mod pyramid;
mod train;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use zoomshift_tensor::{no_grad, Float, Tensor};

use crate::error::{Error, Result};
use crate::imageops::{resize, GrayImage};
use crate::seeding::rng_for;

pub use checkpoint::{load_model, save_model, CHECKPOINT_SCHEMA};
pub use loss::{critic_loss_wgan_gp, critic_loss_wgan_gp_with, mse, Critic, PenaltyNorm};
pub use network::{instance_norm, BoundNet, ConvLayer, ConvNet, OutputActivation};
pub use pyramid::{build_pyramid, pyramid_steps, ScalePyramid};
pub use train::{
    critic_step_loss, generator_step_loss, train_scale, train_singan, train_singan_with_progress,
    ScaleStats, TrainedSinGAN,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinGANConfig {
    pub scale_factor: f64,
    pub min_dim: usize,
    pub max_dim: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Channel count doubles every this many scales, counted from the coarsest.
    pub channel_doubling_interval: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub epochs: usize,
    /// Optimization iterations that make up one epoch on a single image.
    pub iterations_per_epoch: usize,
    pub critic_steps: usize,
    pub generator_steps: usize,
    pub lr_generator: f32,
    pub lr_critic: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Fraction of a scale's iterations after which both learning rates drop.
    pub lr_decay_at: f64,
    pub lr_decay_gamma: f32,
    pub alpha: f64,
    pub lambda_gp: f64,
    pub gp_norm: PenaltyNorm,
    /// Multiplier on the reconstruction RMSE that sets each finer scale's noise amplitude.
    pub noise_amp_init: f64,
    pub seed: u64,
}

impl Default for SinGANConfig {
    fn default() -> Self {
        SinGANConfig {
            scale_factor: 0.8,
            min_dim: 25,
            max_dim: 250,
            base_channels: 32,
            max_channels: 128,
            channel_doubling_interval: 4,
            n_blocks: 5,
            kernel: 3,
            epochs: 30,
            iterations_per_epoch: 5,
            critic_steps: 3,
            generator_steps: 3,
            lr_generator: 5e-4,
            lr_critic: 5e-4,
            beta1: 0.5,
            beta2: 0.999,
            lr_decay_at: 0.8,
            lr_decay_gamma: 0.1,
            alpha: 10.0,
            lambda_gp: 0.1,
            gp_norm: PenaltyNorm::Pixel,
            noise_amp_init: 0.1,
            seed: 0,
        }
    }
}

impl SinGANConfig {
    pub fn channels_at(&self, coarse_index: usize) -> usize {
        let doublings = coarse_index / self.channel_doubling_interval.max(1);
        (self.base_channels << doublings.min(16)).min(self.max_channels.max(self.base_channels))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("singan: {m}")));
        if self.n_blocks < 2 || self.kernel % 2 == 0 {
            return bad("need at least two blocks and an odd kernel");
        }
        if self.epochs == 0 || self.iterations_per_epoch == 0 {
            return bad("epochs and iterations per epoch must be positive");
        }
        if self.critic_steps == 0 || self.generator_steps == 0 {
            return bad("critic and generator steps must be positive");
        }
        if self.base_channels == 0 || !(self.alpha >= 0.0) || !(self.lambda_gp >= 0.0) {
            return bad("channels must be positive and loss weights nonnegative");
        }
        Ok(())
    }
}

/// One trained level: residual generator, patch critic and fixed noises.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinGANScale {
    /// Pyramid index; 0 is the finest level.
    pub index: usize,
    pub shape: (usize, usize),
    pub generator: ConvNet,
    pub critic: ConvNet,
    pub noise_amp: f32,
    /// Random at the coarsest scale, zeros elsewhere.
    pub recon_noise: GrayImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinGANModel {
    /// Coarsest first.
    pub scales: Vec<SinGANScale>,
    pub alpha: f64,
    pub lambda_gp: f64,
    pub scale_factor: f64,
    pub training_image_id: String,
    pub config: SinGANConfig,
}

/// Where each scale's noise comes from when running the generator chain.
pub enum NoiseSource<'a, R: Rng> {
    /// `z*` at the coarsest scale and zeros above it.
    Reconstruction,
    Random(&'a mut R),
}

pub(crate) fn image_to_tensor<T: Float>(img: &GrayImage) -> Tensor<T> {
    let (h, w) = img.dim();
    Tensor::from_f32(img.as_slice().expect("standard layout").as_ref(), &[1, 1, h, w])
}

pub(crate) fn tensor_to_image<T: Float>(t: &Tensor<T>) -> GrayImage {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Array2::from_shape_vec((h, w), t.to_f32()).expect("tensor is a single plane")
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> GrayImage {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal))
}

/// Images enter the model in `[-1, 1]`.
pub(crate) fn to_model_domain(img: &GrayImage) -> GrayImage {
    img.mapv(|v| v * 2.0 - 1.0)
}

pub(crate) fn to_image_domain(img: &GrayImage) -> GrayImage {
    img.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Differentiable residual step: `prev + net(noise_amp * z + prev)`.
pub fn generator_residual<T: Float>(net: &BoundNet<T>, noise_amp: f64, z: &Tensor<T>, prev: &Tensor<T>) -> Tensor<T> {
    let input = z.scale(T::lit(noise_amp)).add(prev);
    prev.add(&net.forward(&input))
}

/// One generator pass at `scale`, in the model's `[-1, 1]` domain.
pub fn generator_forward(scale: &SinGANScale, z: &GrayImage, prev_up: &GrayImage) -> Result<GrayImage> {
    if z.dim() != scale.shape || prev_up.dim() != scale.shape {
        return Err(Error::Shape(format!(
            "scale {} expects {:?}, got noise {:?} and previous {:?}",
            scale.index,
            scale.shape,
            z.dim(),
            prev_up.dim()
        )));
    }
    Ok(no_grad(|| {
        let net = scale.generator.bind::<f32>(false);
        let out = generator_residual(&net, scale.noise_amp as f64, &image_to_tensor(z), &image_to_tensor(prev_up));
        tensor_to_image(&out)
    }))
}

impl SinGANModel {
    pub fn finest_shape(&self) -> (usize, usize) {
        self.scales.last().map(|s| s.shape).unwrap_or((0, 0))
    }

    pub fn noise_amplitudes(&self) -> Vec<f32> {
        self.scales.iter().map(|s| s.noise_amp).collect()
    }

    /// Runs the first `n_scales` generators and returns the last output, in `[-1, 1]`.
    pub fn generate<R: Rng>(&self, n_scales: usize, mut noise: NoiseSource<'_, R>) -> GrayImage {
        run_chain(&self.scales[..n_scales], &mut noise)
    }

    /// Reconstruction of the training image from `z*`, in `[0, 1]`.
    pub fn reconstruct(&self) -> GrayImage {
        to_image_domain(&self.generate::<rand_chacha::ChaCha8Rng>(self.scales.len(), NoiseSource::Reconstruction))
    }
}

/// Generator chain over `scales`, upsampling between levels.
pub(crate) fn run_chain<R: Rng>(scales: &[SinGANScale], noise: &mut NoiseSource<'_, R>) -> GrayImage {
    let mut out: Option<GrayImage> = None;
    for (i, s) in scales.iter().enumerate() {
        let prev = match &out {
            None => Array2::zeros(s.shape),
            Some(o) => resize(o, s.shape.0, s.shape.1),
        };
        let z = match noise {
            NoiseSource::Reconstruction if i == 0 => s.recon_noise.clone(),
            NoiseSource::Reconstruction => Array2::zeros(s.shape),
            NoiseSource::Random(rng) => standard_normal(&mut **rng, s.shape),
        };
        out = Some(generator_forward(s, &z, &prev).expect("shapes follow the scale"));
    }
    out.expect("model has at least one scale")
}

/// MSE between the `z*` reconstruction through the first `n_scales` scales
/// and `real`, both in `[0, 1]`.
pub fn reconstruction_loss(model: &SinGANModel, n_scales: usize, real: &GrayImage) -> Result<f64> {
    if n_scales == 0 || n_scales > model.scales.len() {
        return Err(Error::Config(format!(
            "reconstruction over {n_scales} of {} scales",
            model.scales.len()
        )));
    }
    let rec = to_image_domain(&model.generate::<rand_chacha::ChaCha8Rng>(n_scales, NoiseSource::Reconstruction));
    if rec.dim() != real.dim() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            rec.dim(),
            real.dim()
        )));
    }
    Ok(no_grad(|| mse(&image_to_tensor::<f64>(&rec), &image_to_tensor::<f64>(real)).item()))
}

/// `count` samples in `[0, 1]` at the finest resolution, fresh noise at every scale.
pub fn sample(model: &SinGANModel, count: usize, seed: u64) -> Vec<GrayImage> {
    (0..count)
        .map(|k| {
            let mut rng = rng_for(seed, &[k as u64]);
            to_image_domain(&model.generate(model.scales.len(), NoiseSource::Random(&mut rng)))
        })
        .collect()
}

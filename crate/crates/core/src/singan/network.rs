//! Fully convolutional generator and critic bodies.
//!
//! Parameters live in plain `f32` buffers; [`ConvNet::bind`] lifts them into
//! autodiff tensors of any float type for one forward/backward pass.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zoomshift_tensor::{Conv2dConfig, Float, Tensor};

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    /// `[out_ch, in_ch, kernel, kernel]`, row-major.
    pub weight: Vec<f32>,
    /// Per-channel bias; only used by the tail layer, normalized layers use `beta`.
    pub bias: Vec<f32>,
    /// Instance-norm scale and shift, present on every layer but the tail.
    pub norm: Option<(Vec<f32>, Vec<f32>)>,
}

/// `n_blocks - 1` conv/instance-norm/LeakyReLU blocks followed by a tail conv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub layers: Vec<ConvLayer>,
    pub output: OutputActivation,
}

impl ConvNet {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        n_blocks: usize,
        kernel: usize,
        output: OutputActivation,
        rng: &mut R,
    ) -> Self {
        assert!(n_blocks >= 2, "need at least a head and a tail layer");
        let conv_init = Normal::new(0.0f32, 0.02).expect("valid std");
        let gamma_init = Normal::new(1.0f32, 0.02).expect("valid std");
        let mut layers = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let tail = i + 1 == n_blocks;
            let in_ch = if i == 0 { 1 } else { channels };
            let out_ch = if tail { 1 } else { channels };
            let weight = (0..out_ch * in_ch * kernel * kernel)
                .map(|_| conv_init.sample(rng))
                .collect();
            let norm = (!tail).then(|| {
                (
                    (0..out_ch).map(|_| gamma_init.sample(rng)).collect(),
                    vec![0.0; out_ch],
                )
            });
            layers.push(ConvLayer {
                in_ch,
                out_ch,
                kernel,
                weight,
                bias: if tail { vec![0.0; out_ch] } else { Vec::new() },
                norm,
            });
        }
        ConvNet { layers, output }
    }

    pub fn channels(&self) -> usize {
        self.layers[0].out_ch
    }

    pub fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    /// Parameter buffers in binding order.
    pub fn buffers(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if !l.bias.is_empty() {
                out.push(&l.bias);
            }
            if let Some((g, b)) = &l.norm {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if !l.bias.is_empty() {
                out.push(&mut l.bias);
            }
            if let Some((g, b)) = &mut l.norm {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    /// SHA-256 over all parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for b in self.buffers() {
            for v in b {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Zeroes the tail layer so the network outputs exactly zero (Linear) or tanh(0) = 0.
    pub fn zero_tail(&mut self) {
        let tail = self.layers.last_mut().expect("nonempty");
        tail.weight.iter_mut().for_each(|v| *v = 0.0);
        tail.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn bind<T: Float>(&self, trainable: bool) -> BoundNet<T> {
        let make = |data: &[f32], shape: &[usize]| {
            if trainable {
                Tensor::leaf_from_f32(data, shape)
            } else {
                Tensor::from_f32(data, shape)
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weight: make(&l.weight, &[l.out_ch, l.in_ch, l.kernel, l.kernel]),
                bias: (!l.bias.is_empty()).then(|| make(&l.bias, &[1, l.out_ch, 1, 1])),
                norm: l
                    .norm
                    .as_ref()
                    .map(|(g, b)| (make(g, &[1, l.out_ch, 1, 1]), make(b, &[1, l.out_ch, 1, 1]))),
                kernel: l.kernel,
            })
            .collect();
        BoundNet {
            layers,
            output: self.output,
        }
    }
}

pub struct BoundLayer<T: Float> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    norm: Option<(Tensor<T>, Tensor<T>)>,
    kernel: usize,
}

pub struct BoundNet<T: Float> {
    layers: Vec<BoundLayer<T>>,
    output: OutputActivation,
}

/// Per-sample, per-channel normalization over spatial positions.
pub fn instance_norm<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let inv_area = T::lit(1.0 / (s[2] * s[3]) as f64);
    let mean = x.sum_to(&[n, c, 1, 1]).scale(inv_area);
    let centred = x.sub(&mean);
    let var = centred.square().sum_to(&[n, c, 1, 1]).scale(inv_area);
    let normed = centred.div(&var.offset(T::lit(NORM_EPS)).sqrt());
    normed.mul(gamma).add(beta)
}

impl<T: Float> BoundNet<T> {
    /// Parameter tensors in the same order as [`ConvNet::buffers`].
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
            if let Some((g, b)) = &l.norm {
                out.push(g);
                out.push(b);
            }
        }
        out
    }

    /// `[N, 1, H, W] -> [N, 1, H, W]` with same padding.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = h.conv2d(&l.weight, Conv2dConfig::same(l.kernel));
            if let Some(b) = &l.bias {
                h = h.add(b);
            }
            if let Some((g, b)) = &l.norm {
                h = instance_norm(&h, g, b).leaky_relu(T::lit(LEAKY_SLOPE));
            }
        }
        match self.output {
            OutputActivation::Tanh => h.tanh(),
            OutputActivation::Linear => h,
        }
    }
}

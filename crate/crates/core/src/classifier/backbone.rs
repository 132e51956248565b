//! Frozen feature extractors mapping a 224x224 patch to 2048 pooled features.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use zoomshift_tensor::{no_grad, Conv2dConfig, Tensor};

use super::{GRAY_MEAN, GRAY_STD};
use crate::dataset::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::imageops::GrayImage;
use crate::seeding::rng_for;

pub const FEATURE_DIM: usize = 2048;

/// Channel-major early activations: `data[c * positions + p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub positions: usize,
    pub data: Vec<f32>,
}

pub trait Backbone: Send + Sync {
    /// Stable identifier recorded in checkpoints and reports.
    fn identifier(&self) -> String;

    /// Name of the layer whose activations feed SiFID.
    fn sifid_layer(&self) -> &'static str;

    /// Pooled `FEATURE_DIM` features of one patch. The grayscale plane stands
    /// for the three identical input channels.
    fn features(&self, pixels: &GrayImage) -> Result<Vec<f32>>;

    /// Activations of the first pooling stage.
    fn early_features(&self, pixels: &GrayImage) -> Result<FeatureMap>;

    /// SHA-256 over all backbone parameters.
    fn param_hash(&self) -> String;
}

pub(crate) fn check_patch(pixels: &GrayImage) -> Result<()> {
    if pixels.dim() != (PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::Shape(format!(
            "backbone expects {PATCH_SIZE}x{PATCH_SIZE} input, got {:?}",
            pixels.dim()
        )));
    }
    Ok(())
}

/// `[C, H, W]` activations with owned storage.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Activations {
    pub fn from_image(img: &GrayImage) -> Self {
        let (h, w) = img.dim();
        Activations {
            c: 1,
            h,
            w,
            data: img.iter().copied().collect(),
        }
    }

    pub fn conv(&self, weight: &[f32], out_ch: usize, k: usize, bias: Option<&[f32]>, cfg: Conv2dConfig) -> Self {
        no_grad(|| {
            let x = Tensor::<f32>::new(self.data.clone(), &[1, self.c, self.h, self.w]);
            let wt = Tensor::<f32>::new(weight.to_vec(), &[out_ch, self.c, k, k]);
            let y = x.conv2d(&wt, cfg);
            let (h, w) = (y.shape()[2], y.shape()[3]);
            let mut data = y.data().to_vec();
            if let Some(b) = bias {
                for (ch, chunk) in data.chunks_mut(h * w).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b[ch]);
                }
            }
            Activations { c: out_ch, h, w, data }
        })
    }

    pub fn relu(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self
    }

    pub fn add(mut self, other: &Activations) -> Self {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        self
    }

    /// Max pooling with implicit negative-infinity padding.
    pub fn max_pool(&self, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (self.h + 2 * pad - k) / stride + 1;
        let ow = (self.w + 2 * pad - k) / stride + 1;
        let mut data = vec![f32::NEG_INFINITY; self.c * oh * ow];
        for ch in 0..self.c {
            let plane = &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for di in 0..k {
                        let ii = (i * stride + di) as isize - pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for dj in 0..k {
                            let jj = (j * stride + dj) as isize - pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                m = m.max(plane[ii as usize * self.w + jj as usize]);
                            }
                        }
                    }
                    data[(ch * oh + i) * ow + j] = m;
                }
            }
        }
        Activations { c: self.c, h: oh, w: ow, data }
    }

    pub fn avg_pool2(&self) -> Self {
        let (oh, ow) = (self.h / 2, self.w / 2);
        let mut data = vec![0.0; self.c * oh * ow];
        for ch in 0..self.c {
            let plane = &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for i in 0..oh {
                for j in 0..ow {
                    let at = |r: usize, c: usize| plane[r * self.w + c];
                    data[(ch * oh + i) * ow + j] =
                        0.25 * (at(2 * i, 2 * j) + at(2 * i + 1, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j + 1));
                }
            }
        }
        Activations { c: self.c, h: oh, w: ow, data }
    }

    pub fn into_map(self) -> FeatureMap {
        FeatureMap {
            channels: self.c,
            positions: self.h * self.w,
            data: self.data,
        }
    }
}

/// Fixed multi-scale filter bank followed by two fixed random conv stages.
///
/// Stage 1 (64 filters, 7x7, stride 2 on the half-resolution patch): oriented
/// Gabor pairs, centre-surround and luminance filters plus seeded random
/// zero-mean filters. Stages 2 and 3 are He-scaled Gaussian weights from a
/// fixed seed. The 256 final channels are summarized by eight spatial
/// statistics each.
#[derive(Debug, Clone)]
pub struct FilterbankBackbone {
    conv1: Vec<f32>,
    conv2: Vec<f32>,
    conv3: Vec<f32>,
    standardize: bool,
}

const FB_SEED: u64 = 0x5eed_f11e;
const FB_C1: usize = 64;
const FB_C2: usize = 128;
const FB_C3: usize = 256;
const FB_K1: usize = 7;

fn gaussian_window(k: usize, sigma: f64) -> impl Fn(usize, usize) -> (f64, f64, f64) {
    let c = (k as f64 - 1.0) / 2.0;
    move |i, j| {
        let (y, x) = (i as f64 - c, j as f64 - c);
        (y, x, (-(x * x + y * y) / (2.0 * sigma * sigma)).exp())
    }
}

fn normalize(filter: &mut [f64], zero_mean: bool) {
    if zero_mean {
        let m = filter.iter().sum::<f64>() / filter.len() as f64;
        filter.iter_mut().for_each(|v| *v -= m);
    }
    let n = filter.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    filter.iter_mut().for_each(|v| *v /= n);
}

fn first_stage_filters() -> Vec<f32> {
    let k = FB_K1;
    let mut filters: Vec<Vec<f64>> = Vec::with_capacity(FB_C1);
    for &lambda in &[3.0, 5.0, 8.0] {
        for o in 0..4 {
            let theta = o as f64 * PI / 4.0;
            for &phase in &[0.0, PI / 2.0] {
                let win = gaussian_window(k, 0.5 * lambda);
                let mut f: Vec<f64> = (0..k * k)
                    .map(|idx| {
                        let (y, x, g) = win(idx / k, idx % k);
                        let u = x * theta.cos() + y * theta.sin();
                        g * (2.0 * PI * u / lambda + phase).cos()
                    })
                    .collect();
                normalize(&mut f, true);
                filters.push(f);
            }
        }
    }
    for &(s1, s2) in &[(0.7, 1.4), (1.0, 2.0), (1.5, 3.0)] {
        let (a, b) = (gaussian_window(k, s1), gaussian_window(k, s2));
        let mut f: Vec<f64> = (0..k * k)
            .map(|idx| a(idx / k, idx % k).2 / (s1 * s1) - b(idx / k, idx % k).2 / (s2 * s2))
            .collect();
        normalize(&mut f, true);
        filters.push(f.iter().map(|v| -v).collect());
        filters.push(f);
    }
    for &s in &[1.0, 2.0] {
        let g = gaussian_window(k, s);
        let mut f: Vec<f64> = (0..k * k).map(|idx| g(idx / k, idx % k).2).collect();
        normalize(&mut f, false);
        filters.push(f);
    }
    let mut rng = rng_for(FB_SEED, &[1]);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    while filters.len() < FB_C1 {
        // smooth random patterns: a random field blurred by a small Gaussian
        let raw: Vec<f64> = (0..k * k).map(|_| normal.sample(&mut rng)).collect();
        let g = gaussian_window(3, 0.8);
        let mut f = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                        if ii >= 0 && jj >= 0 && (ii as usize) < k && (jj as usize) < k {
                            acc += g(di, dj).2 * raw[ii as usize * k + jj as usize];
                        }
                    }
                }
                f[i * k + j] = acc;
            }
        }
        normalize(&mut f, true);
        filters.push(f);
    }
    filters.into_iter().flatten().map(|v| v as f32).collect()
}

fn he_weights<R: Rng>(rng: &mut R, out_ch: usize, in_ch: usize, k: usize) -> Vec<f32> {
    let fan_in = (in_ch * k * k) as f32;
    let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
    (0..out_ch * in_ch * k * k).map(|_| normal.sample(rng)).collect()
}

impl Default for FilterbankBackbone {
    fn default() -> Self {
        Self::new()
    }
}

impl FilterbankBackbone {
    pub fn new() -> Self {
        let mut rng = rng_for(FB_SEED, &[2]);
        FilterbankBackbone {
            conv1: first_stage_filters(),
            conv2: he_weights(&mut rng, FB_C2, FB_C1, 3),
            conv3: he_weights(&mut rng, FB_C3, FB_C2, 3),
            standardize: false,
        }
    }

    /// Enables input standardization with natural-image statistics.
    pub fn standardized(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    fn stage1(&self, pixels: &GrayImage) -> Activations {
        let mut input = Activations::from_image(pixels);
        if self.standardize {
            input.data.iter_mut().for_each(|v| *v = (*v - GRAY_MEAN) / GRAY_STD);
        }
        input
            .avg_pool2()
            .conv(&self.conv1, FB_C1, FB_K1, None, Conv2dConfig { stride: 2, padding: 3 })
            .relu()
            .max_pool(2, 2, 0)
    }
}

/// Eight statistics per channel: mean, max, standard deviation, the four
/// quadrant means and the mean of the central region.
pub(crate) fn spatial_statistics(act: &Activations) -> Vec<f32> {
    let (h, w) = (act.h, act.w);
    let mut stats = vec![0.0f32; act.c * 8];
    let region_mean = |plane: &[f32], r0: usize, r1: usize, c0: usize, c1: usize| {
        let mut acc = 0.0f64;
        for r in r0..r1 {
            for c in c0..c1 {
                acc += plane[r * w + c] as f64;
            }
        }
        (acc / ((r1 - r0) * (c1 - c0)).max(1) as f64) as f32
    };
    let (hh, hw) = (h / 2, w / 2);
    let (ch0, ch1) = (h / 2 - h / 6, h / 2 + h / 6 + 1);
    let (cw0, cw1) = (w / 2 - w / 6, w / 2 + w / 6 + 1);
    for ch in 0..act.c {
        let plane = &act.data[ch * h * w..(ch + 1) * h * w];
        let n = plane.len() as f64;
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let max = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let values = [
            mean as f32,
            max,
            var.sqrt() as f32,
            region_mean(plane, 0, hh, 0, hw),
            region_mean(plane, 0, hh, hw, w),
            region_mean(plane, hh, h, 0, hw),
            region_mean(plane, hh, h, hw, w),
            region_mean(plane, ch0, ch1, cw0, cw1),
        ];
        for (s, v) in values.iter().enumerate() {
            stats[s * act.c + ch] = *v;
        }
    }
    stats
}

impl Backbone for FilterbankBackbone {
    fn identifier(&self) -> String {
        let suffix = if self.standardize { "+std" } else { "" };
        format!("filterbank-v1:{}{suffix}", &self.param_hash()[..12])
    }

    fn sifid_layer(&self) -> &'static str {
        "filterbank/pool1"
    }

    fn features(&self, pixels: &GrayImage) -> Result<Vec<f32>> {
        check_patch(pixels)?;
        let same = Conv2dConfig::same(3);
        let act = self
            .stage1(pixels)
            .conv(&self.conv2, FB_C2, 3, None, same)
            .relu()
            .max_pool(2, 2, 0)
            .conv(&self.conv3, FB_C3, 3, None, same)
            .relu();
        let f = spatial_statistics(&act);
        debug_assert_eq!(f.len(), FEATURE_DIM);
        Ok(f)
    }

    fn early_features(&self, pixels: &GrayImage) -> Result<FeatureMap> {
        check_patch(pixels)?;
        Ok(self.stage1(pixels).into_map())
    }

    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for buf in [&self.conv1, &self.conv2, &self.conv3] {
            for v in buf.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

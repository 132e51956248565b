//! ResNet50 inference from a safetensors file with torchvision parameter names.
//! Batch norm is folded into the preceding convolution.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use zoomshift_tensor::Conv2dConfig;

use super::backbone::{check_patch, Activations, Backbone, FeatureMap};
use crate::error::{Error, IoContext, Result};
use crate::imageops::GrayImage;

const BN_EPS: f32 = 1e-5;
const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

/// Minimal reader for little-endian f32 safetensors files.
fn read_safetensors(path: &Path) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
    let bytes = std::fs::read(path).at(path)?;
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated safetensors header"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("header length exceeds file"))?;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..body_start])?;
    let body = &bytes[body_start..];
    let mut out = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let info: TensorInfo = serde_json::from_value(value)?;
        if info.dtype != "F32" {
            return Err(bad(&format!("tensor {name} has dtype {}, only F32 is supported", info.dtype)));
        }
        let (a, b) = info.data_offsets;
        let count: usize = info.shape.iter().product();
        if b > body.len() || a > b || b - a != count * 4 {
            return Err(bad(&format!("tensor {name} has inconsistent offsets")));
        }
        let data = body[a..b].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.insert(name, (info.shape, data));
    }
    Ok(out)
}

/// Convolution with batch norm folded into weight and bias.
#[derive(Debug, Clone)]
struct FoldedConv {
    out_ch: usize,
    k: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
    cfg: Conv2dConfig,
}

impl FoldedConv {
    fn apply(&self, x: &Activations) -> Activations {
        x.conv(&self.weight, self.out_ch, self.k, Some(&self.bias), self.cfg)
    }
}

struct WeightStore(BTreeMap<String, (Vec<usize>, Vec<f32>)>);

impl WeightStore {
    fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        self.0.remove(name).ok_or_else(|| Error::Config(format!("weight file lacks tensor {name}")))
    }

    fn conv_bn(&mut self, conv: &str, bn: &str, stride: usize) -> Result<FoldedConv> {
        let (shape, mut weight) = self.take(&format!("{conv}.weight"))?;
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::Shape(format!("{conv}.weight has shape {shape:?}")));
        }
        let out_ch = shape[0];
        let mut param = |p: &str| -> Result<Vec<f32>> {
            let (s, v) = self.take(&format!("{bn}.{p}"))?;
            if s != [out_ch] {
                return Err(Error::Shape(format!("{bn}.{p} has shape {s:?}")));
            }
            Ok(v)
        };
        let (gamma, beta, mean, var) = (param("weight")?, param("bias")?, param("running_mean")?, param("running_var")?);
        self.0.remove(&format!("{bn}.num_batches_tracked"));
        let per_out = weight.len() / out_ch;
        let mut bias = vec![0.0; out_ch];
        for o in 0..out_ch {
            let s = gamma[o] / (var[o] + BN_EPS).sqrt();
            weight[o * per_out..(o + 1) * per_out].iter_mut().for_each(|w| *w *= s);
            bias[o] = beta[o] - mean[o] * s;
        }
        Ok(FoldedConv {
            out_ch,
            k: shape[2],
            weight,
            bias,
            cfg: Conv2dConfig {
                stride,
                padding: shape[2] / 2,
            },
        })
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: FoldedConv,
    conv2: FoldedConv,
    conv3: FoldedConv,
    downsample: Option<FoldedConv>,
}

impl Bottleneck {
    fn forward(&self, x: &Activations) -> Activations {
        let y = self.conv1.apply(x).relu();
        let y = self.conv2.apply(&y).relu();
        let y = self.conv3.apply(&y);
        match &self.downsample {
            Some(d) => y.add(&d.apply(x)),
            None => y.add(x),
        }
        .relu()
    }
}

/// ResNet50 trunk (global-average-pooled 2048 features). The grayscale plane
/// is replicated into three channels, which without standardization is folded
/// exactly into a one-channel first convolution.
#[derive(Debug, Clone)]
pub struct ResNet50Backbone {
    stem: FoldedConv,
    blocks: Vec<Bottleneck>,
    standardize: bool,
    hash: String,
}

impl ResNet50Backbone {
    pub fn load(path: &Path, standardize: bool) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::WeightsUnavailable(path.to_path_buf()));
        }
        let raw = read_safetensors(path)?;
        let mut hasher = Sha256::new();
        for (name, (_, data)) in &raw {
            if name.starts_with("fc.") {
                continue;
            }
            hasher.update(name.as_bytes());
            data.iter().for_each(|v| hasher.update(v.to_le_bytes()));
        }
        let mut store = WeightStore(raw);
        let mut stem = store.conv_bn("conv1", "bn1", 2)?;
        if stem.weight.len() != stem.out_ch * 3 * stem.k * stem.k {
            return Err(Error::Shape("conv1 must take three input channels".into()));
        }
        if !standardize {
            let kk = stem.k * stem.k;
            stem.weight = (0..stem.out_ch)
                .flat_map(|o| {
                    let w = &stem.weight;
                    (0..kk).map(move |t| (0..3).map(|c| w[(o * 3 + c) * kk + t]).sum::<f32>())
                })
                .collect();
        }
        let mut blocks = Vec::new();
        for (layer, &count) in [3usize, 4, 6, 3].iter().enumerate() {
            for b in 0..count {
                let p = format!("layer{}.{b}", layer + 1);
                let stride = if b == 0 && layer > 0 { 2 } else { 1 };
                let downsample = if b == 0 {
                    Some(store.conv_bn(&format!("{p}.downsample.0"), &format!("{p}.downsample.1"), stride)?)
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    conv1: store.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), 1)?,
                    conv2: store.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), stride)?,
                    conv3: store.conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), 1)?,
                    downsample,
                });
            }
        }
        Ok(ResNet50Backbone {
            stem,
            blocks,
            standardize,
            hash: hex::encode(hasher.finalize()),
        })
    }

    fn input(&self, pixels: &GrayImage) -> Activations {
        let plane = Activations::from_image(pixels);
        if !self.standardize {
            return plane;
        }
        let mut data = Vec::with_capacity(plane.data.len() * 3);
        for c in 0..3 {
            data.extend(plane.data.iter().map(|v| (v - CHANNEL_MEAN[c]) / CHANNEL_STD[c]));
        }
        Activations { c: 3, data, ..plane }
    }

    fn stem(&self, pixels: &GrayImage) -> Activations {
        self.stem.apply(&self.input(pixels)).relu().max_pool(3, 2, 1)
    }
}

impl Backbone for ResNet50Backbone {
    fn identifier(&self) -> String {
        let suffix = if self.standardize { "+std" } else { "" };
        format!("resnet50:{}{suffix}", &self.hash[..12])
    }

    fn sifid_layer(&self) -> &'static str {
        "resnet50/maxpool"
    }

    fn features(&self, pixels: &GrayImage) -> Result<Vec<f32>> {
        check_patch(pixels)?;
        let mut x = self.stem(pixels);
        for block in &self.blocks {
            x = block.forward(&x);
        }
        let hw = x.h * x.w;
        Ok(x.data.chunks(hw).map(|c| c.iter().sum::<f32>() / hw as f32).collect())
    }

    fn early_features(&self, pixels: &GrayImage) -> Result<FeatureMap> {
        check_patch(pixels)?;
        Ok(self.stem(pixels).into_map())
    }

    fn param_hash(&self) -> String {
        self.hash.clone()
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_weights_are_reported() {
        let err = ResNet50Backbone::load(Path::new("/nonexistent/resnet50.safetensors"), false).unwrap_err();
        assert!(matches!(err, Error::WeightsUnavailable(_)));
    }
}

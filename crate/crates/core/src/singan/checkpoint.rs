//! Model directory: `metadata.json` plus raw little-endian `f32` parameter files.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{ConvLayer, ConvNet, OutputActivation};
use super::{SinGANConfig, SinGANModel, SinGANScale};
use crate::error::{Error, IoContext, Result};

pub const CHECKPOINT_SCHEMA: &str = "zoomshift-singan/1";

#[derive(Debug, Serialize, Deserialize)]
struct LayerShape {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    bias: bool,
    norm: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScaleMeta {
    index: usize,
    shape: (usize, usize),
    noise_amp: f32,
    generator: Vec<LayerShape>,
    critic: Vec<LayerShape>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    schema: String,
    training_image_id: String,
    scale_factor: f64,
    alpha: f64,
    lambda_gp: f64,
    noise_amplitudes: Vec<f32>,
    recon_noise_sha256: String,
    scales: Vec<ScaleMeta>,
    config: SinGANConfig,
}

fn layer_shapes(net: &ConvNet) -> Vec<LayerShape> {
    net.layers
        .iter()
        .map(|l| LayerShape {
            in_ch: l.in_ch,
            out_ch: l.out_ch,
            kernel: l.kernel,
            bias: !l.bias.is_empty(),
            norm: l.norm.is_some(),
        })
        .collect()
}

fn skeleton(shapes: &[LayerShape], output: OutputActivation) -> ConvNet {
    ConvNet {
        layers: shapes
            .iter()
            .map(|s| ConvLayer {
                in_ch: s.in_ch,
                out_ch: s.out_ch,
                kernel: s.kernel,
                weight: vec![0.0; s.out_ch * s.in_ch * s.kernel * s.kernel],
                bias: if s.bias { vec![0.0; s.out_ch] } else { Vec::new() },
                norm: s.norm.then(|| (vec![0.0; s.out_ch], vec![0.0; s.out_ch])),
            })
            .collect(),
        output,
    }
}

fn encode(buffers: &[&[f32]]) -> Vec<u8> {
    buffers.iter().flat_map(|b| b.iter().flat_map(|v| v.to_le_bytes())).collect()
}

fn decode_into(bytes: &[u8], mut buffers: Vec<&mut [f32]>, path: &Path) -> Result<()> {
    let expected: usize = buffers.iter().map(|b| b.len() * 4).sum();
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut chunks = bytes.chunks_exact(4);
    for b in buffers.iter_mut() {
        for v in b.iter_mut() {
            *v = f32::from_le_bytes(chunks.next().expect("length checked").try_into().expect("4 bytes"));
        }
    }
    Ok(())
}

fn recon_noise_bytes(model: &SinGANModel) -> Vec<u8> {
    let planes: Vec<&[f32]> = model
        .scales
        .iter()
        .map(|s| s.recon_noise.as_slice().expect("standard layout"))
        .collect();
    encode(&planes)
}

pub fn save_model(model: &SinGANModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let noise = recon_noise_bytes(model);
    let meta = Metadata {
        schema: CHECKPOINT_SCHEMA.into(),
        training_image_id: model.training_image_id.clone(),
        scale_factor: model.scale_factor,
        alpha: model.alpha,
        lambda_gp: model.lambda_gp,
        noise_amplitudes: model.noise_amplitudes(),
        recon_noise_sha256: hex::encode(Sha256::digest(&noise)),
        scales: model
            .scales
            .iter()
            .map(|s| ScaleMeta {
                index: s.index,
                shape: s.shape,
                noise_amp: s.noise_amp,
                generator: layer_shapes(&s.generator),
                critic: layer_shapes(&s.critic),
            })
            .collect(),
        config: model.config.clone(),
    };
    let meta_path = dir.join("metadata.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).at(&meta_path)?;
    let noise_path = dir.join("recon_noise.bin");
    fs::write(&noise_path, noise).at(&noise_path)?;
    for (k, s) in model.scales.iter().enumerate() {
        for (name, net) in [("generator", &s.generator), ("critic", &s.critic)] {
            let p = dir.join(format!("scale_{k:02}_{name}.bin"));
            fs::write(&p, encode(&net.buffers())).at(&p)?;
        }
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<SinGANModel> {
    let meta_path = dir.join("metadata.json");
    let meta: Metadata = serde_json::from_str(&fs::read_to_string(&meta_path).at(&meta_path)?)?;
    if meta.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Config(format!(
            "checkpoint schema {:?}, expected {CHECKPOINT_SCHEMA:?}",
            meta.schema
        )));
    }
    let noise_path = dir.join("recon_noise.bin");
    let noise = fs::read(&noise_path).at(&noise_path)?;
    if hex::encode(Sha256::digest(&noise)) != meta.recon_noise_sha256 {
        return Err(Error::Config(format!(
            "{} does not match its recorded checksum",
            noise_path.display()
        )));
    }
    let mut scales = Vec::with_capacity(meta.scales.len());
    for (k, s) in meta.scales.iter().enumerate() {
        let mut generator = skeleton(&s.generator, OutputActivation::Tanh);
        let mut critic = skeleton(&s.critic, OutputActivation::Linear);
        for (name, net) in [("generator", &mut generator), ("critic", &mut critic)] {
            let p = dir.join(format!("scale_{k:02}_{name}.bin"));
            let bytes = fs::read(&p).at(&p)?;
            decode_into(&bytes, net.buffers_mut(), &p)?;
        }
        scales.push(SinGANScale {
            index: s.index,
            shape: s.shape,
            generator,
            critic,
            noise_amp: s.noise_amp,
            recon_noise: Array2::zeros(s.shape),
        });
    }
    let planes: Vec<&mut [f32]> = scales
        .iter_mut()
        .map(|s| s.recon_noise.as_slice_mut().expect("standard layout"))
        .collect();
    decode_into(&noise, planes, &noise_path)?;
    Ok(SinGANModel {
        scales,
        alpha: meta.alpha,
        lambda_gp: meta.lambda_gp,
        scale_factor: meta.scale_factor,
        training_image_id: meta.training_image_id,
        config: meta.config,
    })
}

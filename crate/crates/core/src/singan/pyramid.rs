//! Multi-scale image pyramid, coarsest level first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{resize, GrayImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePyramid {
    /// Levels from coarsest to finest.
    pub images: Vec<GrayImage>,
    /// Requested downscaling factor.
    pub scale_factor: f64,
    /// Factor actually used between levels, adjusted so the coarsest level
    /// lands on `min_dim`.
    pub effective_factor: f64,
    pub min_dim: usize,
    pub max_dim: usize,
}

impl ScalePyramid {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn finest(&self) -> &GrayImage {
        self.images.last().expect("pyramid has at least one level")
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.images.iter().map(|i| i.dim()).collect()
    }
}

/// Number of downscaling steps from `finest_min` down to `min_dim`.
pub fn pyramid_steps(finest_min: usize, min_dim: usize, r: f64) -> usize {
    if finest_min <= min_dim {
        return 0;
    }
    // the epsilon keeps exact powers of r from rounding up a whole step
    ((min_dim as f64 / finest_min as f64).ln() / r.ln() - 1e-9).ceil().max(0.0) as usize
}

/// Caps the image at `max_dim`, then builds `steps + 1` bilinear levels with the
/// per-level factor adjusted to `(min_dim / min(H, W))^(1 / steps)`.
pub fn build_pyramid(image: &GrayImage, r: f64, min_dim: usize, max_dim: usize) -> Result<ScalePyramid> {
    if !(r > 0.0 && r < 1.0) || min_dim == 0 || max_dim < min_dim {
        return Err(Error::Config(format!(
            "invalid pyramid parameters r={r}, min_dim={min_dim}, max_dim={max_dim}"
        )));
    }
    let (h, w) = image.dim();
    let finest = if h.max(w) > max_dim {
        let s = max_dim as f64 / h.max(w) as f64;
        let (nh, nw) = (
            ((h as f64 * s).round() as usize).max(1),
            ((w as f64 * s).round() as usize).max(1),
        );
        resize(image, nh, nw)
    } else {
        image.clone()
    };
    let (fh, fw) = finest.dim();
    if fh.min(fw) < min_dim {
        return Err(Error::ImageTooSmall {
            shape: (h, w),
            min_dim,
        });
    }
    let steps = pyramid_steps(fh.min(fw), min_dim, r);
    let effective = if steps == 0 {
        r
    } else {
        (min_dim as f64 / fh.min(fw) as f64).powf(1.0 / steps as f64)
    };
    let mut images = Vec::with_capacity(steps + 1);
    for k in (1..=steps).rev() {
        let s = effective.powi(k as i32);
        let lh = ((fh as f64 * s).round() as usize).max(1);
        let lw = ((fw as f64 * s).round() as usize).max(1);
        images.push(resize(&finest, lh, lw));
    }
    images.push(finest);
    Ok(ScalePyramid {
        images,
        scale_factor: r,
        effective_factor: effective,
        min_dim,
        max_dim,
    })
}

//! Grayscale image helpers: separable triangle-filter resampling, min-max
//! normalization and 8/16-bit PNG I/O.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, IoContext, Result};

/// Grayscale image, row-major `(rows, cols)`, intensities nominally in `[0, 1]`.
pub type GrayImage = Array2<f32>;

/// Tap weights of a 1-D triangle-filter resampler from `src` to `dst` samples.
///
/// Sample centres sit at half-integer positions. When upsampling this is plain
/// bilinear interpolation with edge clamping; when downsampling the kernel is
/// widened by the scale factor so the result is antialiased.
fn triangle_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let centre = (i as f64 + 0.5) * scale;
            let lo = ((centre - support).floor() as isize).max(0) as usize;
            let hi = ((centre + support).ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .filter_map(|j| {
                    let d = ((j as f64 + 0.5 - centre) / support).abs();
                    (d < 1.0).then(|| (j, 1.0 - d))
                })
                .collect();
            if taps.is_empty() {
                // centre beyond the last sample: clamp
                taps.push((centre.floor().clamp(0.0, (src - 1) as f64) as usize, 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resizes to exactly `(rows, cols)`; identity when the shape already matches.
pub fn resize(img: &GrayImage, rows: usize, cols: usize) -> GrayImage {
    let (h, w) = img.dim();
    assert!(h > 0 && w > 0 && rows > 0 && cols > 0, "resize of empty image");
    if (h, w) == (rows, cols) {
        return img.clone();
    }
    let col_taps = triangle_taps(w, cols);
    let row_taps = triangle_taps(h, rows);
    let mut tmp = Array2::<f64>::zeros((h, cols));
    for r in 0..h {
        for (c, taps) in col_taps.iter().enumerate() {
            tmp[[r, c]] = taps.iter().map(|&(j, wt)| img[[r, j]] as f64 * wt).sum();
        }
    }
    let mut out = Array2::<f32>::zeros((rows, cols));
    for (r, taps) in row_taps.iter().enumerate() {
        for c in 0..cols {
            out[[r, c]] = taps.iter().map(|&(j, wt)| tmp[[j, c]] * wt).sum::<f64>() as f32;
        }
    }
    out
}

/// Min-max rescale to `[0, 1]`; a constant image maps to all zeros.
pub fn normalize_min_max(img: &GrayImage) -> GrayImage {
    let (lo, hi) = img
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::zeros(img.dim());
    }
    img.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

pub fn load_png(path: &Path) -> Result<GrayImage> {
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let luma = dynimg.to_luma16();
    let (w, h) = luma.dimensions();
    let data: Vec<f32> = luma.as_raw().iter().map(|&v| v as f32 / 65535.0).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("buffer matches dimensions"))
}

/// Writes a 16-bit grayscale PNG, clamping to `[0, 1]`.
pub fn save_png16(img: &GrayImage, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u16> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dimensions");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes an 8-bit grayscale PNG (binary masks, previews).
pub fn save_png8(img: &GrayImage, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u8> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let img = Array2::from_shape_fn((7, 5), |(r, c)| (r * 5 + c) as f32 / 34.0);
        assert_eq!(resize(&img, 7, 5), img);
    }

    #[test]
    fn downsampling_preserves_constant_images() {
        let img = Array2::from_elem((64, 48), 0.3f32);
        let out = resize(&img, 25, 19);
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn constant_normalizes_to_zero() {
        let img = Array2::from_elem((4, 4), 0.7f32);
        assert!(normalize_min_max(&img).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn png16_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((9, 11), |(r, c)| ((r * 11 + c) as f32 / 98.0).min(1.0));
        let path = dir.path().join("x.png");
        save_png16(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.dim(), (9, 11));
        assert!(back.iter().zip(img.iter()).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}

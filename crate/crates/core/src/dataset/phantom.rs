//! Procedural mammogram phantoms with exact lesion masks.
//!
//! Benign lesions are smooth ellipses; malignant lesions are lobulated cores
//! with radiating spicules. All appearance parameters live in [`PhantomConfig`].

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BiopsyLabel, MammogramRecord, Modality};
use crate::seeding::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub version: String,
    pub rows: usize,
    pub cols: usize,
    pub images_per_patient: usize,
    /// Probability that a lesion is malignant.
    pub malignant_fraction: f64,
    pub texture_components: usize,
    /// Texture spatial frequency range, cycles per pixel.
    pub texture_frequency: (f64, f64),
    pub tissue_level: f64,
    pub texture_amplitude: f64,
    pub lesion_radius: (f64, f64),
    /// Minor/major axis ratio range of benign ellipses.
    pub benign_eccentricity: (f64, f64),
    pub spicule_count: (usize, usize),
    /// Spicule length as a multiple of the lesion radius.
    pub spicule_length: (f64, f64),
    pub lesion_contrast: (f64, f64),
    pub film_noise: f64,
    pub digital_noise: f64,
    pub film_contrast: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            version: "phantom-v1".into(),
            rows: 160,
            cols: 128,
            images_per_patient: 4,
            malignant_fraction: 0.29,
            texture_components: 10,
            texture_frequency: (0.02, 0.12),
            tissue_level: 0.38,
            texture_amplitude: 0.14,
            lesion_radius: (5.0, 11.0),
            benign_eccentricity: (0.55, 1.0),
            spicule_count: (6, 12),
            spicule_length: (0.7, 1.5),
            lesion_contrast: (0.2, 0.35),
            film_noise: 0.03,
            digital_noise: 0.01,
            film_contrast: 0.85,
        }
    }
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; keeps the stream layout independent of rand_distr internals.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

struct Breast {
    centre_row: f64,
    semi_rows: f64,
    semi_cols: f64,
}

impl Breast {
    /// Normalized elliptical radius; the breast is anchored at column 0 (chest wall).
    fn radius(&self, r: f64, c: f64) -> f64 {
        (((r - self.centre_row) / self.semi_rows).powi(2) + (c / self.semi_cols).powi(2)).sqrt()
    }
}

/// Lesion intensity profile in `[0, 1]`; zero outside the lesion.
enum Lesion {
    Ellipse {
        row: f64,
        col: f64,
        major: f64,
        minor: f64,
        angle: f64,
    },
    Spiculated {
        row: f64,
        col: f64,
        core: f64,
        harmonics: Vec<(f64, f64, f64)>,
        spicules: Vec<(f64, f64, f64)>,
    },
}

impl Lesion {
    fn profile(&self, r: f64, c: f64) -> f64 {
        match self {
            Lesion::Ellipse {
                row,
                col,
                major,
                minor,
                angle,
            } => {
                let (dr, dc) = (r - row, c - col);
                let u = dr * angle.cos() + dc * angle.sin();
                let v = -dr * angle.sin() + dc * angle.cos();
                let d = ((u / major).powi(2) + (v / minor).powi(2)).sqrt();
                1.0 - smoothstep(0.8, 1.0, d)
            }
            Lesion::Spiculated {
                row,
                col,
                core,
                harmonics,
                spicules,
            } => {
                let (dr, dc) = (r - row, c - col);
                let rho = (dr * dr + dc * dc).sqrt();
                let phi = dr.atan2(dc);
                let wobble: f64 = harmonics
                    .iter()
                    .map(|&(k, amp, phase)| amp * (k * phi + phase).cos())
                    .sum();
                let boundary = core * (1.0 + wobble);
                let mut value = 1.0 - smoothstep(0.75, 1.0, rho / boundary);
                for &(theta, length, width) in spicules {
                    // distance to the segment from the core edge outward along theta
                    let along = dc * theta.cos() + dr * theta.sin();
                    let across = (-dc * theta.sin() + dr * theta.cos()).abs();
                    let start = 0.6 * core;
                    let end = core + length;
                    if along < start || along > end || across >= width {
                        continue;
                    }
                    let taper = 1.0 - 0.6 * (along - start) / (end - start);
                    value = value.max((1.0 - across / width) * taper);
                }
                value
            }
        }
    }
}

fn make_lesion(rng: &mut ChaCha8Rng, cfg: &PhantomConfig, malignant: bool, row: f64, col: f64, radius: f64) -> Lesion {
    if malignant {
        let harmonics = (2..=4)
            .map(|k| (k as f64, rng.random_range(0.03..0.12), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let n = rng.random_range(cfg.spicule_count.0..=cfg.spicule_count.1.max(cfg.spicule_count.0));
        let offset = rng.random_range(0.0..2.0 * PI);
        let spicules = (0..n)
            .map(|j| {
                let theta = offset + 2.0 * PI * j as f64 / n as f64 + rng.random_range(-0.25..0.25);
                (theta, radius * uniform(rng, cfg.spicule_length), rng.random_range(0.8..1.4))
            })
            .collect();
        Lesion::Spiculated {
            row,
            col,
            core: radius * rng.random_range(0.55..0.75),
            harmonics,
            spicules,
        }
    } else {
        Lesion::Ellipse {
            row,
            col,
            major: radius,
            minor: radius * uniform(rng, cfg.benign_eccentricity),
            angle: rng.random_range(0.0..PI),
        }
    }
}

fn render_image(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    modality: Modality,
    label: BiopsyLabel,
) -> (Array2<f32>, Option<Array2<bool>>) {
    let (rows, cols) = (cfg.rows, cfg.cols);
    let breast = Breast {
        centre_row: rows as f64 / 2.0 + rng.random_range(-8.0..8.0),
        semi_rows: rows as f64 * rng.random_range(0.40..0.48),
        semi_cols: cols as f64 * rng.random_range(0.75..0.92),
    };
    let components: Vec<(f64, f64, f64, f64)> = (0..cfg.texture_components)
        .map(|_| {
            (
                uniform(rng, cfg.texture_frequency),
                rng.random_range(0.0..PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let amp_total: f64 = components.iter().map(|c| c.3).sum::<f64>().max(1e-9);
    let (noise, contrast) = match modality {
        Modality::Film => (cfg.film_noise, cfg.film_contrast),
        Modality::Digital => (cfg.digital_noise, 1.0),
    };

    let lesion = if label == BiopsyLabel::None {
        None
    } else {
        let radius = uniform(rng, cfg.lesion_radius);
        // keep the lesion well inside the tissue and the frame
        let margin = radius * 1.5 + 2.0;
        let (row, col) = loop {
            let r = rng.random_range(margin..rows as f64 - margin);
            let c = rng.random_range(margin..cols as f64 - margin);
            if breast.radius(r, c) < 0.6 {
                break (r, c);
            }
        };
        Some((
            make_lesion(rng, cfg, label == BiopsyLabel::Malignant, row, col, radius),
            uniform(rng, cfg.lesion_contrast),
        ))
    };

    let mut pixels = Array2::<f32>::zeros((rows, cols));
    let mut mask = lesion.as_ref().map(|_| Array2::from_elem((rows, cols), false));
    for r in 0..rows {
        for c in 0..cols {
            let (rf, cf) = (r as f64, c as f64);
            let br = breast.radius(rf, cf);
            let n = gaussian(rng) * noise;
            let v = if br < 1.0 {
                let texture: f64 = components
                    .iter()
                    .map(|&(f, theta, phase, a)| {
                        a * (2.0 * PI * f * (rf * theta.cos() + cf * theta.sin()) + phase).cos()
                    })
                    .sum::<f64>()
                    / amp_total;
                let skin = 1.0 - smoothstep(0.9, 1.0, br);
                let mut v = (cfg.tissue_level + cfg.texture_amplitude * texture) * skin;
                if let Some((les, amp)) = &lesion {
                    let p = les.profile(rf, cf);
                    if p > 0.0 {
                        v += amp * p;
                        if let Some(m) = mask.as_mut() {
                            m[[r, c]] = true;
                        }
                    }
                }
                v * contrast + n
            } else {
                0.5 * n.abs()
            };
            pixels[[r, c]] = v.clamp(0.0, 1.0) as f32;
        }
    }
    (pixels, mask)
}

/// Phantom dataset with the default appearance configuration.
pub fn generate_phantom_dataset(n_patients: usize, lesion_prevalence: f64, seed: u64) -> Vec<MammogramRecord> {
    generate_phantom_dataset_with(&PhantomConfig::default(), n_patients, lesion_prevalence, seed)
}

/// Each image independently carries a lesion with probability `lesion_prevalence`.
pub fn generate_phantom_dataset_with(
    cfg: &PhantomConfig,
    n_patients: usize,
    lesion_prevalence: f64,
    seed: u64,
) -> Vec<MammogramRecord> {
    let mut records = Vec::with_capacity(n_patients * cfg.images_per_patient);
    for p in 0..n_patients {
        let mut prng = rng_for(seed, &[p as u64]);
        let modality = if prng.random_bool(0.5) {
            Modality::Film
        } else {
            Modality::Digital
        };
        for i in 0..cfg.images_per_patient {
            let mut rng = rng_for(seed, &[p as u64, i as u64 + 1]);
            let label = if rng.random::<f64>() < lesion_prevalence {
                if rng.random::<f64>() < cfg.malignant_fraction {
                    BiopsyLabel::Malignant
                } else {
                    BiopsyLabel::Benign
                }
            } else {
                BiopsyLabel::None
            };
            let (pixels, mask) = render_image(&mut rng, cfg, modality, label);
            records.push(MammogramRecord {
                image_id: format!("ph{p:04}_{i}"),
                patient_id: format!("P{p:04}"),
                modality,
                pixels,
                lesion_mask: mask,
                biopsy_label: label,
            });
        }
    }
    records
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_prevalence_has_no_lesions() {
        let recs = generate_phantom_dataset(10, 0.0, 3);
        assert!(recs.iter().all(|r| r.biopsy_label == BiopsyLabel::None && r.lesion_mask.is_none()));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_phantom_dataset(6, 0.5, 11);
        let b = generate_phantom_dataset(6, 0.5, 11);
        assert_eq!(a, b);
        let c = generate_phantom_dataset(6, 0.5, 12);
        assert_ne!(a, c);
    }

    #[test]
    fn masks_exist_exactly_for_labelled_images() {
        let recs = generate_phantom_dataset(200, 0.5, 21);
        let mut lesions = 0;
        for r in &recs {
            r.validate().unwrap();
            let nonempty = r.lesion_mask.as_ref().is_some_and(|m| m.iter().any(|&v| v));
            assert_eq!(nonempty, r.biopsy_label != BiopsyLabel::None, "{}", r.image_id);
            lesions += nonempty as usize;
        }
        assert!(lesions > 300 && lesions < 500, "{lesions}");
    }
}

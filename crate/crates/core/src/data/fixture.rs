//! Synthetic fixture generator.
//!
//! Produces learnable desk-scale datasets in which every biomarker is
//! rendered according to its locality: LOCAL biomarkers appear as compact
//! bright Gaussian blobs inside disjoint zones (IRHRF upper, IRF lower),
//! GLOBAL biomarkers as whole-image structure (PAVF: background gradient
//! direction, FAVF: texture frequency, VD: speckle density), and DRT_DME
//! as a thickened mid-scale band. Generation is a pure function of the
//! config: identical configs yield byte-identical images and manifests.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{write_gray_image, write_manifest, Dataset, ImageRecord, Label, SplitTag};
use crate::error::{Error, Result};
use crate::seeding::stream_rng;

/// Intensity contributions of the planted features; the sum stays in [0, 1].
pub mod render {
    /// Flat background level.
    pub const BASE: f64 = 0.12;
    /// Range of the PAVF background gradient.
    pub const RAMP_AMPLITUDE: f64 = 0.2;
    /// Amplitude of the FAVF stripe texture.
    pub const TEXTURE_AMPLITUDE: f64 = 0.05;
    /// FAVF stripe cycles across the image: present vs absent.
    pub const TEXTURE_CYCLES_PRESENT: f64 = 8.0;
    pub const TEXTURE_CYCLES_ABSENT: f64 = 2.0;
    /// VD speckle brightness and dot densities (dots are 2x2 so they
    /// survive resampling).
    pub const SPECKLE_VALUE: f64 = 0.12;
    pub const SPECKLE_DENSITY_PRESENT: f64 = 0.03;
    pub const SPECKLE_DENSITY_ABSENT: f64 = 0.002;
    /// DRT_DME band brightness and thickness fractions of the image side.
    pub const BAND_VALUE: f64 = 0.25;
    pub const BAND_THICK_PRESENT: f64 = 0.16;
    pub const BAND_THICK_ABSENT: f64 = 0.04;
    /// Local blob peak contributions; well above the 0.3 detection
    /// contrast. IRHRF blobs are small and sharp, IRF blobs twice the
    /// width, so the two locals differ in appearance, not only zone.
    pub const IRHRF_BLOB_AMPLITUDE: f64 = 0.55;
    pub const IRF_BLOB_AMPLITUDE: f64 = 0.5;
    /// Blob zones as fractions of the image side (rows). Kept away from
    /// the borders so random resized crops rarely cut a blob off.
    pub const IRHRF_ZONE: (f64, f64) = (0.16, 0.40);
    pub const IRF_ZONE: (f64, f64) = (0.60, 0.84);
}

/// Configuration for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// Independent Bernoulli prior per biomarker, each in (0, 1).
    pub label_prior: [f64; 6],
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            n_patients: 12,
            images_per_patient: 8,
            image_size: 64,
            label_prior: [0.5; 6],
            seed: 7,
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 2 {
            return Err(Error::contract("fixture needs at least 2 patients"));
        }
        if self.images_per_patient < 1 {
            return Err(Error::contract("fixture needs at least 1 image per patient"));
        }
        if self.n_patients * self.images_per_patient < 10 {
            return Err(Error::contract(
                "fixture needs n_patients * images_per_patient >= 10",
            ));
        }
        if self.image_size < 32 {
            return Err(Error::contract("fixture image_size must be >= 32"));
        }
        for (i, p) in self.label_prior.iter().enumerate() {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(Error::contract(format!(
                    "label_prior[{i}] = {p} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Zone of rows a LOCAL biomarker's blobs are confined to.
pub fn blob_zone(image_size: usize, zone: (f64, f64)) -> (usize, usize) {
    let lo = (zone.0 * image_size as f64).floor() as usize;
    let hi = (zone.1 * image_size as f64).floor() as usize;
    (lo, hi)
}

/// Gaussian width of the small (IRHRF-style) blobs at this image size.
pub fn base_blob_sigma(size: usize) -> f64 {
    (size as f64 / 24.0).max(1.5)
}

/// Radius of the filled IRF disks; twice the IRHRF blob core so the two
/// locals differ in scale and edge profile.
pub fn irf_disk_radius(size: usize) -> f64 {
    (size as f64 / 10.0).max(3.0)
}

/// One filled bright disk with a sharp edge; flat top, no tails.
fn render_disk(img: &mut Array2<f64>, rng: &mut ChaCha12Rng, zone: (f64, f64), radius: f64) {
    let size = img.nrows();
    let (zone_lo, zone_hi) = blob_zone(size, zone);
    let margin = radius.ceil() as usize + 1;
    let y_margin = margin.min((zone_hi - zone_lo).saturating_sub(2) / 2);
    let x_margin = margin.min(size / 4);
    let cy = rng.random_range(zone_lo + y_margin..zone_hi - y_margin) as f64;
    let cx = rng.random_range(x_margin..size - x_margin) as f64;
    let reach = radius.ceil() as isize + 1;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let y = cy as isize + dy;
            let x = cx as isize + dx;
            if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                continue;
            }
            let r = ((dy * dy + dx * dx) as f64).sqrt();
            // 1px soft edge.
            let cover = (radius + 0.5 - r).clamp(0.0, 1.0);
            img[(y as usize, x as usize)] += render::IRF_BLOB_AMPLITUDE * cover;
        }
    }
}

fn render_blobs(
    img: &mut Array2<f64>,
    rng: &mut ChaCha12Rng,
    zone: (f64, f64),
    sigma: f64,
    amplitude: f64,
    max_blobs: usize,
) {
    let size = img.nrows();
    let (zone_lo, zone_hi) = blob_zone(size, zone);
    let margin = (2.0 * sigma).ceil() as usize + 1;
    // Keep at least a couple of candidate rows in narrow zones.
    let y_margin = margin.min((zone_hi - zone_lo).saturating_sub(2) / 2);
    let x_margin = margin.min(size / 4);
    let n_blobs = rng.random_range(3..=max_blobs);
    for _ in 0..n_blobs {
        let cy = rng.random_range(zone_lo + y_margin..zone_hi - y_margin) as f64;
        let cx = rng.random_range(x_margin..size - x_margin) as f64;
        let radius = (3.0 * sigma).ceil() as isize;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let y = cy as isize + dy;
                let x = cx as isize + dx;
                if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                    continue;
                }
                let r2 = (dy * dy + dx * dx) as f64;
                img[(y as usize, x as usize)] +=
                    amplitude * (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

/// Render one image deterministically from its RNG stream and label bits.
pub fn render_image(size: usize, bits: [bool; 6], rng: &mut ChaCha12Rng) -> Array2<f64> {
    let mut img = Array2::from_elem((size, size), render::BASE);
    let s = size as f64;

    // PAVF: gradient direction flips with the label.
    for ((y, x), v) in img.indexed_iter_mut() {
        let t = if bits[1] { x as f64 / (s - 1.0) } else { y as f64 / (s - 1.0) };
        *v += render::RAMP_AMPLITUDE * t;
    }

    // FAVF: vertical stripe texture, frequency keyed to the label.
    let cycles = if bits[2] {
        render::TEXTURE_CYCLES_PRESENT
    } else {
        render::TEXTURE_CYCLES_ABSENT
    };
    for ((_, x), v) in img.indexed_iter_mut() {
        *v += render::TEXTURE_AMPLITUDE
            * (2.0 * std::f64::consts::PI * cycles * x as f64 / s).sin();
    }

    // DRT_DME: central band, thick when present.
    let frac = if bits[4] { render::BAND_THICK_PRESENT } else { render::BAND_THICK_ABSENT };
    let half = (frac * s / 2.0).round() as isize;
    let mid = (size / 2) as isize;
    for y in (mid - half).max(0)..(mid + half).min(size as isize) {
        for x in 0..size {
            img[(y as usize, x)] += render::BAND_VALUE;
        }
    }

    // VD: uniform speckle, density keyed to the label.
    let density = if bits[5] {
        render::SPECKLE_DENSITY_PRESENT
    } else {
        render::SPECKLE_DENSITY_ABSENT
    };
    // Dots live on a stride-2 grid so they never stack.
    let n_dots = (density * s * s).round() as usize;
    let cells = size / 2;
    let chosen = rand::seq::index::sample(rng, cells * cells, n_dots.min(cells * cells));
    for idx in chosen.iter() {
        let (y, x) = (2 * (idx / cells), 2 * (idx % cells));
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            if y + dy < size && x + dx < size {
                img[(y + dy, x + dx)] += render::SPECKLE_VALUE;
            }
        }
    }

    // Local blobs last so their peak contrast is unaffected by speckle order.
    if bits[0] {
        render_blobs(
            &mut img,
            rng,
            render::IRHRF_ZONE,
            base_blob_sigma(size),
            render::IRHRF_BLOB_AMPLITUDE,
            5,
        );
    }
    if bits[3] {
        render_disk(&mut img, rng, render::IRF_ZONE, irf_disk_radius(size));
    }

    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Generate a fixture dataset under `out_dir`: PNG images plus a manifest.
pub fn generate_fixture(config: &FixtureConfig, out_dir: &Path) -> Result<Dataset> {
    config.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut records = Vec::with_capacity(config.n_patients * config.images_per_patient);
    for pi in 0..config.n_patients {
        let patient_id = format!("P{pi:03}");
        for ii in 0..config.images_per_patient {
            let mut rng = stream_rng(config.seed, &format!("fixture/{pi}/{ii}"));
            let week = (ii as u32) * 4;

            let mut bits = [false; 6];
            for (b, bit) in bits.iter_mut().enumerate() {
                *bit = rng.random::<f64>() < config.label_prior[b];
            }
            let n_positive = bits.iter().filter(|b| **b).count() as f64;
            let clinical = [
                0.5 * n_positive + rng.random_range(-0.1..0.1),
                week as f64 / 100.0 + rng.random_range(-0.05..0.05),
            ];

            let img = render_image(config.image_size, bits, &mut rng);
            let file_name = format!("{patient_id}_w{week:03}_{ii:02}.png");
            write_gray_image(&images_dir.join(&file_name), &img)?;

            records.push(ImageRecord {
                image_id: format!("{patient_id}-w{week:03}-{ii:02}"),
                patient_id: patient_id.clone(),
                week,
                image_path: format!("images/{file_name}"),
                labels: bits.iter().map(|b| Label::from_bit(*b)).collect(),
                clinical: Some(clinical),
            });
        }
    }

    let ds = Dataset::new(records, SplitTag::Train, out_dir.to_path_buf());
    write_manifest(&ds, &out_dir.join("manifest.jsonl"))?;
    Ok(ds)
}

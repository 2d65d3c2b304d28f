//! Synthetic datasets with known ground truth: each image is partitioned by
//! a few Gaussian blobs, features are noisy class directions averaged over
//! each patch, and optional images are noisy class colors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{
    write_feature_file, write_image_png, write_label_png, DatasetManifest, FeatureMap, LabelMap, ManifestRecord,
    RgbImage,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub classes: usize,
    pub channels: usize,
    /// Feature grid side.
    pub grid: usize,
    /// Image pixels per feature cell along each axis.
    pub patch: usize,
    /// Standard deviation of per-channel feature noise.
    pub feature_noise: f64,
    /// Cosine between class 0 and every other class. The others share
    /// `class_overlap^2` with each other.
    pub class_overlap: f64,
    /// Standard deviation of per-pixel color noise, in [0, 1] units.
    pub color_noise: f64,
    /// Write RGB images next to the features.
    pub with_images: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 64,
            classes: 3,
            channels: 16,
            grid: 16,
            patch: 1,
            feature_noise: 0.14,
            class_overlap: 0.3,
            color_noise: 0.08,
            with_images: false,
            seed: 7,
        }
    }
}

/// Sample of one synthetic image.
pub struct SynthSample {
    pub features: FeatureMap,
    pub aug_features: FeatureMap,
    pub image: RgbImage,
    pub labels: LabelMap,
}

/// Standard normal by Box-Muller.
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Unit class directions: class 0 is `e_0`, class `c > 0` is
/// `overlap * e_0 + sqrt(1 - overlap^2) * e_c`. Unequal pairwise cosines keep
/// the principal components from lining up with the classes.
pub fn class_directions(classes: usize, channels: usize, overlap: f64) -> Result<Vec<Vec<f64>>> {
    if classes > channels || !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidConfig(format!(
            "{classes} classes in {channels} channels with overlap {overlap}"
        )));
    }
    Ok((0..classes)
        .map(|c| {
            let mut v = vec![0.0; channels];
            if c == 0 {
                v[0] = 1.0;
            } else {
                v[0] = overlap;
                v[c] = (1.0 - overlap * overlap).sqrt();
            }
            v
        })
        .collect())
}

pub fn generate_sample(cfg: &SynthConfig, index: usize, directions: &[Vec<f64>]) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let k = cfg.classes;
    let side = cfg.grid * cfg.patch;

    // Blob centers, widths and weights in unit coordinates.
    let blobs: Vec<(f64, f64, f64, f64)> = (0..k)
        .map(|_| {
            (
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.15..0.35),
                rng.gen_range(0.7..1.3),
            )
        })
        .collect();
    let mut ids = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            let (py, px) = ((y as f64 + 0.5) / side as f64, (x as f64 + 0.5) / side as f64);
            let mut best = (0, f64::NEG_INFINITY);
            for (c, &(cy, cx, s, w)) in blobs.iter().enumerate() {
                let score = w.ln() - ((py - cy).powi(2) + (px - cx).powi(2)) / (2.0 * s * s);
                if score > best.1 {
                    best = (c, score);
                }
            }
            ids[y * side + x] = best.0 as u8;
        }
    }
    let labels = LabelMap::new(side, side, ids)?;

    let palette: Vec<[f64; 3]> = (0..k)
        .map(|c| {
            let hue = c as f64 / k as f64;
            [
                0.5 + 0.35 * (std::f64::consts::TAU * hue).cos(),
                0.5 + 0.35 * (std::f64::consts::TAU * (hue + 1.0 / 3.0)).cos(),
                0.5 + 0.35 * (std::f64::consts::TAU * (hue + 2.0 / 3.0)).cos(),
            ]
        })
        .collect();
    let mut rgb = vec![0f32; 3 * side * side];
    for (i, &id) in labels.ids().iter().enumerate() {
        for ch in 0..3 {
            let v = palette[id as usize][ch] + cfg.color_noise * normal(&mut rng);
            rgb[ch * side * side + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let image = RgbImage::new(side, side, rgb)?;

    let g = cfg.grid;
    let c = cfg.channels;
    let mut clean = vec![0f32; c * g * g];
    let mut aug = vec![0f32; c * g * g];
    let gain = 1.0 + 0.1 * normal(&mut rng);
    for gy in 0..g {
        for gx in 0..g {
            let mut mean = vec![0.0; c];
            for dy in 0..cfg.patch {
                for dx in 0..cfg.patch {
                    let id = labels.ids()[(gy * cfg.patch + dy) * side + gx * cfg.patch + dx] as usize;
                    mean.iter_mut().zip(&directions[id]).for_each(|(m, d)| *m += d);
                }
            }
            let area = (cfg.patch * cfg.patch) as f64;
            for ch in 0..c {
                let base = mean[ch] / area + cfg.feature_noise * normal(&mut rng);
                clean[ch * g * g + gy * g + gx] = base as f32;
                let jitter = 0.5 * cfg.feature_noise * normal(&mut rng);
                aug[ch * g * g + gy * g + gx] = (gain * base + jitter) as f32;
            }
        }
    }
    let id = format!("synth_{index:04}");
    Ok(SynthSample {
        features: FeatureMap::new(c, g, g, clean, id.clone())?,
        aug_features: FeatureMap::new(c, g, g, aug, id)?,
        image,
        labels,
    })
}

/// Writes the dataset under `dir` and returns its manifest (also saved as
/// `dir/manifest.txt`).
pub fn generate_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let directions = class_directions(cfg.classes, cfg.channels, cfg.class_overlap)?;
    let mut records = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let s = generate_sample(cfg, i, &directions)?;
        let stem = format!("synth_{i:04}");
        let record = ManifestRecord {
            feature_path: dir.join(format!("{stem}.pmft")),
            aug_feature_path: Some(dir.join(format!("{stem}_aug.pmft"))),
            image_path: cfg.with_images.then(|| dir.join(format!("{stem}.png"))),
            label_path: Some(dir.join(format!("{stem}_label.png"))),
        };
        write_feature_file(&s.features, &record.feature_path)?;
        write_feature_file(&s.aug_features, record.aug_feature_path.as_ref().unwrap())?;
        if let Some(path) = &record.image_path {
            write_image_png(&s.image, path)?;
        }
        write_label_png(&s.labels, record.label_path.as_ref().unwrap())?;
        records.push(record);
    }
    let manifest = DatasetManifest::new(records, cfg.classes)?;
    manifest.save(dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_have_requested_overlap() {
        let d = class_directions(3, 16, 0.3).unwrap();
        let cos = |a: usize, b: usize| -> f64 { d[a].iter().zip(&d[b]).map(|(x, y)| x * y).sum() };
        for a in 0..3 {
            assert!((cos(a, a) - 1.0).abs() < 1e-12);
        }
        assert!((cos(0, 1) - 0.3).abs() < 1e-12);
        assert!((cos(0, 2) - 0.3).abs() < 1e-12);
        assert!((cos(1, 2) - 0.09).abs() < 1e-12);
    }

    #[test]
    fn samples_are_deterministic() {
        let cfg = SynthConfig::default();
        let d = class_directions(3, 16, 0.3).unwrap();
        let a = generate_sample(&cfg, 3, &d).unwrap();
        let b = generate_sample(&cfg, 3, &d).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels.height(), 16);
    }
}

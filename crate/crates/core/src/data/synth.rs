//! Synthetic texture dataset: one parametric texture family per class.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{write_ppm, PpmImage};
use super::{ClassLabel, DatasetManifest, Entry, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::rng::{streams, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Optional per-class counts overriding `per_class`, for imbalanced sets.
    pub counts: Option<Vec<usize>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            per_class: 16,
            size: 64,
            seed: 0,
            counts: None,
        }
    }
}

impl SyntheticSpec {
    pub fn class_counts(&self) -> Vec<usize> {
        self.counts.clone().unwrap_or_else(|| vec![self.per_class; ClassLabel::COUNT])
    }

    pub fn validate(&self) -> Result<()> {
        let counts = self.class_counts();
        if counts.len() != ClassLabel::COUNT {
            return Err(Error::Config(format!("synthetic: expected 10 class counts, got {}", counts.len())));
        }
        if counts.contains(&0) {
            return Err(Error::Config("synthetic: every class needs at least one image".into()));
        }
        if self.size < 4 {
            return Err(Error::Config(format!("synthetic: size {} too small", self.size)));
        }
        Ok(())
    }
}

/// Texture family parameters of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    /// Sinusoid cycles across the image.
    pub frequency: f64,
    /// Sinusoid orientation in radians.
    pub orientation: f64,
    pub blobs: usize,
    /// Base hue in [0, 1).
    pub hue: f64,
}

pub fn class_texture(class: usize) -> TextureParams {
    let c = class as f64;
    TextureParams {
        frequency: 2.0 + (class % 5) as f64 * 1.5,
        orientation: c * std::f64::consts::PI / 10.0,
        blobs: (class * 3) % 7,
        hue: c / 10.0,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders one `[3, size, size]` image of `params` with per-image jitter.
pub fn render_texture(params: &TextureParams, size: usize, rng: &mut SeededRng) -> Tensor<f32> {
    let hue = params.hue + rng.uniform_range(-0.02, 0.02);
    let theta = params.orientation + rng.uniform_range(-0.1, 0.1);
    let freq = params.frequency * rng.uniform_range(0.9, 1.1);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let blobs: Vec<(f64, f64, f64)> = (0..params.blobs)
        .map(|_| {
            (
                rng.uniform_range(0.0, size as f64),
                rng.uniform_range(0.0, size as f64),
                size as f64 * rng.uniform_range(0.06, 0.12),
            )
        })
        .collect();
    let base = hsv_to_rgb(hue, 0.65, 0.75);
    let (ct, st) = (theta.cos(), theta.sin());
    let k = std::f64::consts::TAU * freq / size as f64;
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let wave = 0.75 + 0.2 * (k * (xf * ct + yf * st) + phase).sin();
            let blob: f64 = blobs
                .iter()
                .map(|&(bx, by, r)| (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * r * r)).exp())
                .sum::<f64>()
                .min(1.0);
            for c in 0..3 {
                let v = base[c] * wave + 0.25 * blob + rng.uniform_range(-0.02, 0.02);
                data[c * plane + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("shape matches")
}

/// Writes `images/<class>/<idx>.ppm` and `labels.csv` under `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut entries = Vec::new();
    for (class, &count) in ClassLabel::ALL.iter().zip(&spec.class_counts()) {
        let rel_dir = PathBuf::from("images").join(class.slug());
        let dir = out_dir.join(&rel_dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let params = class_texture(class.index());
        for i in 0..count {
            let mut rng = SeededRng::derived(spec.seed, streams::SYNTH, (class.index() * 1_000_000 + i) as u64);
            let img = render_texture(&params, spec.size, &mut rng);
            let rel = rel_dir.join(format!("{i:04}.ppm"));
            write_ppm(&out_dir.join(&rel), &PpmImage::from_tensor(&img)?)?;
            entries.push(Entry { path: rel, label: *class });
        }
    }
    let manifest = DatasetManifest::new(out_dir, entries)?;
    manifest.write_csv(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_parameters_distinct() {
        let ps: Vec<_> = (0..10).map(class_texture).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(ps[i], ps[j]);
            }
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            per_class: 2,
            size: 8,
            seed: 5,
            counts: None,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_synthetic(&spec, a.path()).unwrap();
        let mb = generate_synthetic(&spec, b.path()).unwrap();
        assert_eq!(ma.len(), 20);
        assert_eq!(ma.entries, mb.entries);
        for e in &ma.entries {
            let x = std::fs::read(a.path().join(&e.path)).unwrap();
            let y = std::fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(x, y);
        }
        let loaded = super::super::load_manifest(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.entries, ma.entries);
    }
}

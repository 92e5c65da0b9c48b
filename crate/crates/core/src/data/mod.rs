//! Datasets: class labels, CSV manifests, stratified splits, in-memory image
//! sets and seeded batching.

mod image;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, SeededRng};
use crate::tensor::Tensor;

pub use image::{load_image, read_ppm, resize_bilinear, write_ppm, PpmImage};
pub use synth::{class_texture, generate_synthetic, render_texture, SyntheticSpec, TextureParams};

pub const MANIFEST_FILE: &str = "labels.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Angioectasia,
    Bleeding,
    Erosion,
    Erythema,
    ForeignBody,
    Lymphangiectasia,
    Normal,
    Polyp,
    Ulcer,
    Worms,
}

impl ClassLabel {
    pub const COUNT: usize = 10;

    pub const ALL: [ClassLabel; 10] = [
        ClassLabel::Angioectasia,
        ClassLabel::Bleeding,
        ClassLabel::Erosion,
        ClassLabel::Erythema,
        ClassLabel::ForeignBody,
        ClassLabel::Lymphangiectasia,
        ClassLabel::Normal,
        ClassLabel::Polyp,
        ClassLabel::Ulcer,
        ClassLabel::Worms,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Angioectasia => "Angioectasia",
            ClassLabel::Bleeding => "Bleeding",
            ClassLabel::Erosion => "Erosion",
            ClassLabel::Erythema => "Erythema",
            ClassLabel::ForeignBody => "Foreign Body",
            ClassLabel::Lymphangiectasia => "Lymphangiectasia",
            ClassLabel::Normal => "Normal",
            ClassLabel::Polyp => "Polyp",
            ClassLabel::Ulcer => "Ulcer",
            ClassLabel::Worms => "Worms",
        }
    }

    /// Directory-safe name: lowercase with underscores.
    pub fn slug(self) -> String {
        self.name().to_lowercase().replace(' ', "_")
    }

    /// Case-insensitive; underscores count as spaces.
    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.trim().replace('_', " ").to_lowercase();
        Self::ALL.into_iter().find(|c| c.name().to_lowercase() == norm)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: ClassLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

#[derive(Deserialize, Serialize)]
struct Row {
    filename: String,
    label: String,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<Entry>) -> Result<Self> {
        let root = root.into();
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.path) {
                return Err(Error::Manifest {
                    path: root.clone(),
                    detail: format!("duplicate filename {}", e.path.display()),
                });
            }
        }
        Ok(Self { root, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> [usize; ClassLabel::COUNT] {
        let mut c = [0; ClassLabel::COUNT];
        for e in &self.entries {
            c[e.label.index()] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label.index()).collect()
    }

    fn subset(&self, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        Self {
            root: self.root.clone(),
            entries: indices.into_iter().map(|i| self.entries[i].clone()).collect(),
        }
    }

    /// Writes `filename,label` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Manifest {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        for e in &self.entries {
            w.serialize(Row {
                filename: e.path.to_string_lossy().replace('\\', "/"),
                label: e.label.name().to_string(),
            })
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parses a `filename,label` manifest. Paths are relative to its directory.
pub fn load_manifest(csv_path: &Path) -> Result<DatasetManifest> {
    let bad = |detail: String| Error::Manifest {
        path: csv_path.to_path_buf(),
        detail,
    };
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["filename", "label"] {
        return Err(bad(format!("expected header `filename,label`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let (Some(file), Some(label)) = (record.get(0), record.get(1)) else {
            return Err(bad(format!("row {row}: expected two fields")));
        };
        let label = ClassLabel::parse(label).ok_or_else(|| Error::UnknownLabel {
            path: csv_path.to_path_buf(),
            row,
            label: label.to_string(),
        })?;
        entries.push(Entry {
            path: PathBuf::from(file),
            label,
        });
    }
    if entries.is_empty() {
        return Err(bad("manifest has no entries".into()));
    }
    let root = csv_path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(root, entries).map_err(|e| match e {
        Error::Manifest { detail, .. } => bad(detail),
        other => other,
    })
}

/// Stratified split: each class contributes `round(count * val_fraction)`
/// entries to validation, chosen by a seeded shuffle. Both halves keep
/// manifest order.
pub fn split(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let mut rng = SeededRng::with_stream(seed, streams::SPLIT);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in ClassLabel::ALL {
        let mut idx: Vec<usize> = (0..manifest.len())
            .filter(|&i| manifest.entries[i].label == class)
            .collect();
        if idx.len() == 1 {
            return Err(Error::Config(format!("class {class} has a single entry and cannot be split")));
        }
        rng.shuffle(&mut idx);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    Ok((manifest.subset(train), manifest.subset(val)))
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics over every pixel of `images` (`[C, H, W]` each).
    /// A constant channel gets std 1 so normalization stays finite.
    pub fn compute(images: &[Tensor<f32>]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid("channel_stats", "no images"))?;
        let c = first.shape()[0];
        let (mut sum, mut sq, mut n) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        for img in images {
            if img.shape() != first.shape() {
                return Err(Error::shape("channel_stats", first.shape(), img.shape()));
            }
            let plane = img.len() / c;
            for (ch, chunk) in img.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            n += plane;
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n - m * m).max(0.0).sqrt();
                if sd < 1e-12 { 1.0 } else { sd }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &mut Tensor<f32>) {
        let c = self.mean.len();
        let plane = image.len() / c;
        for (ch, chunk) in image.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
        }
    }
}

/// Decoded images held in memory, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    /// `[3, H, W]` each.
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[N, 3, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    /// Loads every entry, resizing to `size x size`.
    pub fn load(manifest: &DatasetManifest, size: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            images.push(load_image(&manifest.root.join(&e.path), Some((size, size)))?);
        }
        Ok(Self {
            images,
            labels: manifest.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn stats(&self) -> Result<ChannelStats> {
        ChannelStats::compute(&self.images)
    }

    /// Stacks `indices` into one batch, optionally normalized.
    pub fn gather(&self, indices: &[usize], norm: Option<&ChannelStats>) -> Result<Batch> {
        let mut parts: Vec<Tensor<f32>> = indices.iter().map(|&i| self.images[i].clone()).collect();
        if let Some(n) = norm {
            parts.iter_mut().for_each(|t| n.apply(t));
        }
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Ok(Batch {
            indices: indices.to_vec(),
            images: Tensor::stack(&refs)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// One epoch of batches in seeded shuffled order.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        norm: Option<&ChannelStats>,
    ) -> Result<Vec<Batch>> {
        batch_indices(self.len(), batch_size, seed, epoch)?
            .iter()
            .map(|idx| self.gather(idx, norm))
            .collect()
    }
}

/// Shuffles `0..len` with a generator derived from `(seed, epoch)` and chunks
/// it; the final short batch is kept.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::invalid("batches", "empty dataset"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    SeededRng::derived(seed, streams::SHUFFLE, epoch).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Fixed-order batches for evaluation.
pub fn sequential_indices(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..len)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

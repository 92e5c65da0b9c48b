//! Declarative run description, loaded from JSON and patched by flags.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sslf_core::data::SyntheticSpec;
use sslf_core::{BackboneConfig, CorruptionSpec, Error, FusionConfig, Result, TrainConfig, UNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `labels.csv`. When absent the synthetic set under
    /// `<out_dir>/data` is used, generated on first need.
    pub dir: Option<PathBuf>,
    /// Images are resized to `image_size x image_size`.
    pub image_size: usize,
    pub val_fraction: f64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            image_size: 64,
            val_fraction: 0.2,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// One pretraining run per entry.
    pub pretexts: Vec<CorruptionSpec>,
    pub unet: UNetConfig,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub pretrain: TrainConfig,
    pub classify: TrainConfig,
    pub out_dir: PathBuf,
    /// Master seed: split, initialization, and the seeds of both training stages.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            pretexts: vec![CorruptionSpec::gaussian_noise(0.1), CorruptionSpec::patch_mask(8, 0.5)],
            unet: UNetConfig::default(),
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            pretrain: TrainConfig::default(),
            classify: TrainConfig::default(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the master seed into the stage configurations.
    pub fn resolve_seeds(&mut self) {
        self.pretrain.seed = self.seed;
        self.classify.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.data.image_size;
        if size < 8 {
            return Err(Error::Config(format!("data.image_size {size} is too small")));
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!("data.val_fraction {} outside (0, 1)", self.data.val_fraction)));
        }
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("data.dir {} does not exist", dir.display())));
            }
        }
        self.data.synthetic.validate()?;
        self.unet.validate()?;
        if size % self.unet.spatial_multiple() != 0 {
            return Err(Error::Config(format!(
                "data.image_size {size} is not a multiple of {} required by a depth-{} U-Net",
                self.unet.spatial_multiple(),
                self.unet.depth
            )));
        }
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.pretrain.validate()?;
        self.classify.validate()?;
        let mut kinds = HashSet::new();
        for p in &self.pretexts {
            p.validate_for(size, size)?;
            if !kinds.insert(p.kind) {
                return Err(Error::Config(format!("pretext {} configured twice", p.kind.name())));
            }
        }
        Ok(())
    }
}

//! Optimization, checkpoints, reconstruction pretraining and classifier training.

pub mod adam;
pub mod checkpoint;
mod classify;
mod pretrain;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_update, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, ModelKind};
pub use classify::{
    classifier_checkpoint, config_divergence, evaluate, model_from_checkpoint, train_classifier, ClassifierOutcome,
    EpochMetrics, Evaluation, Predictor,
};
pub use pretrain::{
    pretrain, select_pretext, unet_checkpoint, unet_from_checkpoint, PretextReport, PretrainOutcome, Selection,
};

/// Returned by per-epoch observers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeights {
    /// `w_c = N / (K * n_c)` over the classes present in training data.
    InverseFrequency,
    Explicit(Vec<f64>),
}

impl ClassWeights {
    pub fn resolve(&self, labels: &[usize], k: usize) -> Result<Vec<f64>> {
        match self {
            ClassWeights::Explicit(w) => {
                if w.len() != k || w.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::Config(format!("class_weights needs {k} non-negative values")));
                }
                Ok(w.clone())
            }
            ClassWeights::InverseFrequency => {
                let mut counts = vec![0usize; k];
                for &l in labels {
                    counts[l] += 1;
                }
                let present = counts.iter().filter(|&&c| c > 0).count() as f64;
                let n = labels.len() as f64;
                Ok(counts
                    .iter()
                    .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
                    .collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub class_weights: Option<ClassWeights>,
    /// Store Adam moments in the checkpoint.
    pub save_optimizer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            class_weights: None,
            save_optimizer: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale batch size.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} {b} outside (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, batch, loss })
    }
}

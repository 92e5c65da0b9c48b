//! Self-supervised U-Net pretraining and feature-fusion classification on a
//! small reverse-mode autodiff engine.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod backbone;
pub mod corruption;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unet;

pub use corruption::{CorruptionKind, CorruptionSpec, LossPolicy, MaskMap};
pub use error::{Error, ErrorCategory, Result};
pub use nn::{Ctx, Mode, NormKind, ParamStore};
pub use rng::SeededRng;
pub use tensor::{Real, Tape, Tensor, Var};
pub use backbone::{Backbone, BackboneConfig};
pub use data::{ClassLabel, DatasetManifest, ImageSet};
pub use fusion::{FusedModel, FusionConfig, VariantKind};
pub use metrics::{ClassificationReport, ConfusionMatrix};
pub use training::{Checkpoint, ModelKind, TrainConfig};
pub use unet::{UNet, UNetConfig};

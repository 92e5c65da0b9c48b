use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_finite, Adam, Checkpoint, Flow, ModelKind, TrainConfig};
use crate::backbone::BackboneConfig;
use crate::data::{batch_indices, sequential_indices, ImageSet};
use crate::error::{Error, Result};
use crate::fusion::{FusedModel, FusionConfig, UNetCache};
use crate::metrics::{confusion, report, ClassificationReport, ConfusionMatrix};
use crate::nn::Ctx;
use crate::rng::{streams, SeededRng};
use crate::tensor::Tensor;
use crate::unet::UNetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub report: ClassificationReport,
}

pub struct ClassifierOutcome {
    /// Weights of the epoch with the highest validation balanced accuracy.
    pub model: FusedModel<f32>,
    pub history: Vec<EpochMetrics>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    /// Accuracy of `model` on the training set, computed by [`evaluate`].
    pub train_accuracy: f64,
    pub checkpoint: Checkpoint,
}

fn stack_rows(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack(&refs)
}

/// Anything that maps a `[N, 3, H, W]` batch to one class per row.
pub trait Predictor {
    fn predict_batch(&mut self, batch: &Tensor<f32>) -> Result<Vec<usize>>;
}

impl Predictor for FusedModel<f32> {
    fn predict_batch(&mut self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        self.predict(batch)
    }
}

/// Predictions for `set` in fixed order and batch layout.
pub fn evaluate(model: &mut dyn Predictor, set: &ImageSet, batch_size: usize) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut predictions = Vec::with_capacity(set.len());
    for idx in sequential_indices(set.len(), batch_size) {
        predictions.extend(model.predict_batch(&stack_rows(&set.images, &idx)?)?);
    }
    let cm = confusion(&set.labels, &predictions)?;
    Ok(Evaluation {
        labels: set.labels.clone(),
        predictions,
        report: report(&cm)?,
        confusion: cm,
    })
}

/// Per-image frozen U-Net outputs, so each epoch only runs the trainable parts.
struct FrozenCache {
    reconstructions: Vec<Tensor<f32>>,
    vectors: Vec<Tensor<f32>>,
}

impl FrozenCache {
    fn build(model: &mut FusedModel<f32>, set: &ImageSet, batch_size: usize) -> Result<Option<Self>> {
        let mut out = Self {
            reconstructions: Vec::with_capacity(set.len()),
            vectors: Vec::with_capacity(set.len()),
        };
        for idx in sequential_indices(set.len(), batch_size) {
            let Some(c) = model.unet_cache(&stack_rows(&set.images, &idx)?)? else {
                return Ok(None);
            };
            for i in 0..idx.len() {
                out.reconstructions.push(c.reconstruction.index_first(i)?);
                out.vectors.push(c.vector.index_first(i)?);
            }
        }
        Ok(Some(out))
    }

    fn gather(&self, idx: &[usize]) -> Result<UNetCache<f32>> {
        Ok(UNetCache {
            reconstruction: stack_rows(&self.reconstructions, idx)?,
            vector: stack_rows(&self.vectors, idx)?,
        })
    }
}

/// Configuration echo stored in classifier checkpoints.
fn model_config(model: &FusedModel<f32>) -> Value {
    let unet = model.unet.as_ref().map(|u| json!(u.config)).unwrap_or(Value::Null);
    let backbone = model.backbone.as_ref().map(|b| json!(b.config)).unwrap_or(Value::Null);
    json!({ "fusion": model.config, "unet": unet, "backbone": backbone })
}

pub fn classifier_checkpoint(model: &FusedModel<f32>, metadata: Value) -> Checkpoint {
    let mut ck = Checkpoint::new(ModelKind::Classifier, model_config(model), metadata);
    for (prefix, store) in model.stores() {
        ck.push_store(prefix, store);
    }
    ck
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<FusedModel<f32>> {
    ck.expect_kind(ModelKind::Classifier)?;
    let cfg = ck.config();
    let fusion: FusionConfig = serde_json::from_value(cfg["fusion"].clone())?;
    let unet: UNetConfig = match &cfg["unet"] {
        Value::Null => UNetConfig::default(),
        v => serde_json::from_value(v.clone())?,
    };
    let backbone: BackboneConfig = match &cfg["backbone"] {
        Value::Null => BackboneConfig::default(),
        v => serde_json::from_value(v.clone())?,
    };
    let mut model = FusedModel::build(&fusion, &unet, &backbone, 0)?;
    for (prefix, store) in model.stores_mut() {
        ck.load_store(prefix, store)?;
    }
    Ok(model)
}

/// Dotted paths of the fields where `a` and `b` differ.
pub fn config_divergence(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), &p, out);
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

/// Trains the unfrozen parts of `model` with cross-entropy, evaluating on
/// `val` after every epoch and keeping the weights with the best balanced
/// accuracy (earliest on ties).
pub fn train_classifier(
    mut model: FusedModel<f32>,
    train: &ImageSet,
    val: &ImageSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Flow,
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("classifier training needs non-empty train and validation sets".into()));
    }
    let k = model.config.num_classes;
    if let Some(&bad) = train.labels.iter().chain(&val.labels).find(|&&l| l >= k) {
        return Err(Error::Config(format!("label {bad} outside the {k} model classes")));
    }
    let stats = train.stats()?;
    let (mean, std): (Vec<f32>, Vec<f32>) = (
        stats.mean.iter().map(|&v| v as f32).collect(),
        stats.std.iter().map(|&v| v as f32).collect(),
    );
    model.set_input_normalization(&mean, &std)?;
    let weights: Option<Vec<f32>> = match &cfg.class_weights {
        Some(w) => Some(w.resolve(&train.labels, k)?.iter().map(|&v| v as f32).collect()),
        None => None,
    };
    let cache = FrozenCache::build(&mut model, train, cfg.batch_size)?;
    let mut adam = Adam::new(cfg.adam());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, FusedModel<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (b, idx) in batch_indices(train.len(), cfg.batch_size, cfg.seed, epoch as u64)?.iter().enumerate() {
            let stream_index = (epoch as u64) << 32 | b as u64;
            let mut cx = Ctx::train(SeededRng::derived(cfg.seed, streams::DROPOUT, stream_index));
            let x = cx.tape.constant(stack_rows(&train.images, idx)?);
            let c = cache.as_ref().map(|c| c.gather(idx)).transpose()?;
            let logits = model.forward_cached(&mut cx, x, c.as_ref())?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let loss = cx.tape.softmax_cross_entropy(logits, &labels, weights.as_deref())?;
            let lv = cx.tape.value(loss).item()? as f64;
            check_finite(lv, epoch, b + 1)?;
            cx.tape.backward(loss)?;
            let mut stores = model.stores_mut();
            for (_, s) in stores.iter_mut() {
                s.collect_grads(&cx.tape);
            }
            adam.step(&mut stores)?;
            loss_sum += lv * idx.len() as f64;
            seen += idx.len();
        }
        let ev = evaluate(&mut model, val, cfg.batch_size)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy: ev.report.accuracy,
            val_balanced_accuracy: ev.report.balanced_accuracy,
        };
        if best.as_ref().is_none_or(|(b, _, _)| m.val_balanced_accuracy > *b) {
            best = Some((m.val_balanced_accuracy, epoch, model.clone()));
        }
        let flow = on_epoch(&m);
        history.push(m);
        if flow == Flow::Stop {
            break;
        }
    }

    let (best_epoch, mut model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    let train_accuracy = evaluate(&mut model, train, cfg.batch_size)?.report.accuracy;
    let metadata = json!({
        "best_epoch": best_epoch,
        "train_accuracy": train_accuracy,
        "history": history,
        "train": cfg,
        "input_stats": stats,
    });
    let mut checkpoint = classifier_checkpoint(&model, metadata);
    if cfg.save_optimizer {
        checkpoint.tensors.extend(adam.state_tensors());
    }
    Ok(ClassifierOutcome {
        model,
        history,
        best_epoch,
        train_accuracy,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StageSpec;
    use crate::fusion::VariantKind;

    fn tiny(variant: VariantKind) -> FusedModel<f32> {
        let unet = UNetConfig {
            depth: 1,
            base_channels: 4,
            ..UNetConfig::default()
        };
        let backbone = BackboneConfig {
            stem_channels: 4,
            stages: vec![StageSpec::new(2, 8, 1, 2, 3)],
            feature_dim: 8,
            ..BackboneConfig::default()
        };
        let fusion = FusionConfig {
            variant,
            common_dim: 8,
            head_dims: vec![8],
            ..FusionConfig::default()
        };
        FusedModel::build(&fusion, &unet, &backbone, 5).unwrap()
    }

    fn set(n: usize) -> ImageSet {
        let mut r = SeededRng::new(2);
        ImageSet {
            images: (0..n).map(|_| Tensor::from_fn(vec![3, 8, 8], |_| r.uniform() as f32)).collect(),
            labels: (0..n).map(|i| i % 3).collect(),
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        for v in VariantKind::ALL {
            let mut m = tiny(v);
            let data = set(6);
            let before = evaluate(&mut m, &data, 4).unwrap();
            let ck = Checkpoint::from_bytes(&classifier_checkpoint(&m, json!({})).to_bytes()).unwrap();
            let mut back = model_from_checkpoint(&ck).unwrap();
            assert_eq!(back, m, "{v}");
            assert_eq!(evaluate(&mut back, &data, 3).unwrap().predictions, before.predictions);
        }
    }

    #[test]
    fn training_runs_and_reports_consistent_accuracy() {
        let data = set(6);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let out = train_classifier(tiny(VariantKind::EfficientFusionUNet), &data, &data, &cfg, &mut |_| Flow::Continue)
            .unwrap();
        assert_eq!(out.history.len(), 2);
        let mut m = out.model;
        let acc = evaluate(&mut m, &data, 4).unwrap().report.accuracy;
        assert_eq!(acc, out.train_accuracy);
    }

    #[test]
    fn divergence_paths() {
        let a = json!({"x": 1, "n": {"a": 1, "b": 2}});
        let b = json!({"x": 1, "n": {"a": 3}, "y": true});
        assert_eq!(config_divergence(&a, &b), vec!["n.a", "n.b", "y"]);
        assert!(config_divergence(&a, &a).is_empty());
    }
}

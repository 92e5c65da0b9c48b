use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{check_finite, Adam, Checkpoint, Flow, ModelKind, TrainConfig};
use crate::corruption::{batch_loss_mask, corrupt, CorruptionKind, CorruptionSpec, MaskMap};
use crate::data::{batch_indices, sequential_indices, ImageSet};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::rng::{streams, SeededRng};
use crate::tensor::Tensor;
use crate::unet::{psnr_from_mse, UNet, UNetConfig};

/// Outcome of one pretext task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretextReport {
    pub kind: CorruptionKind,
    pub spec: CorruptionSpec,
    /// Validation MSE of the best checkpoint, against clean images.
    pub val_mse: f64,
    pub psnr: f64,
    /// MSE of the corrupted validation inputs against clean images.
    pub baseline_mse: f64,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
}

pub struct PretrainOutcome {
    /// Weights of the best validation epoch.
    pub unet: UNet<f32>,
    pub report: PretextReport,
    pub checkpoint: Checkpoint,
}

/// A corrupted copy of `set` drawn from a fixed-seed generator per image.
fn corrupted_set(set: &ImageSet, spec: &CorruptionSpec, seed: u64) -> Result<Vec<Tensor<f32>>> {
    set.images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = SeededRng::derived(seed, streams::CORRUPT_VAL, i as u64);
            Ok(corrupt(img, spec, &mut rng)?.0)
        })
        .collect()
}

fn stack(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack(&refs)
}

/// Full-image mean squared error of the reconstructions of `inputs` against `clean`.
fn reconstruction_mse(unet: &mut UNet<f32>, inputs: &[Tensor<f32>], clean: &[Tensor<f32>], batch: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for idx in sequential_indices(inputs.len(), batch) {
        let out = unet.reconstruct(&stack(inputs, &idx)?)?;
        let target = stack(clean, &idx)?;
        sum += out
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        count += out.len();
    }
    Ok(sum / count as f64)
}

fn mse_between(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        sum += x.data().iter().zip(y.data()).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>();
        n += x.len();
    }
    sum / n as f64
}

pub fn unet_checkpoint(unet: &UNet<f32>, metadata: serde_json::Value) -> Checkpoint {
    let mut ck = Checkpoint::new(ModelKind::UNet, json!(unet.config), metadata);
    ck.push_store("", &unet.params);
    ck
}

pub fn unet_from_checkpoint(ck: &Checkpoint) -> Result<UNet<f32>> {
    ck.expect_kind(ModelKind::UNet)?;
    let config: UNetConfig = serde_json::from_value(ck.config().clone())?;
    let mut unet = UNet::build(&config, 0)?;
    ck.load_store("", &mut unet.params)?;
    Ok(unet)
}

/// Trains `unet` to undo `spec` on `train`, keeping the weights with the
/// lowest validation MSE. `on_epoch` receives `(epoch, train_loss, val_mse)`.
pub fn pretrain(
    mut unet: UNet<f32>,
    train: &ImageSet,
    val: &ImageSet,
    spec: &CorruptionSpec,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64, f64) -> Flow,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("pretraining needs non-empty train and validation sets".into()));
    }
    let &[_, h, w] = train.images[0].shape() else { unreachable!() };
    spec.validate_for(h, w)?;
    unet.params.set_frozen(false);

    let val_inputs = corrupted_set(val, spec, cfg.seed)?;
    let baseline_mse = mse_between(&val_inputs, &val.images);
    let policy = spec.policy();
    let channels = unet.config.in_channels;
    let mut adam = Adam::new(cfg.adam());
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    let mut best: Option<(f64, usize, UNet<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut corrupt_rng = SeededRng::derived(cfg.seed, streams::CORRUPT_TRAIN, epoch as u64);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (b, idx) in batch_indices(train.len(), cfg.batch_size, cfg.seed, epoch as u64)?.iter().enumerate() {
            let mut inputs = Vec::with_capacity(idx.len());
            let mut masks: Vec<MaskMap> = Vec::with_capacity(idx.len());
            for &i in idx {
                let (x, m) = corrupt(&train.images[i], spec, &mut corrupt_rng)?;
                inputs.push(x);
                masks.push(m);
            }
            let mask = batch_loss_mask(&masks, channels, policy);
            // a batch whose masks select nothing contributes no loss
            if mask.as_ref().is_some_and(|m| !m.iter().any(|&v| v)) {
                continue;
            }
            let mut cx = Ctx::train(SeededRng::derived(cfg.seed, streams::DROPOUT, epoch as u64));
            let x = cx.tape.constant(Tensor::stack(&inputs.iter().collect::<Vec<_>>())?);
            let target = cx.tape.constant(stack(&train.images, idx)?);
            let y = unet.forward(&mut cx, x)?;
            let loss = cx.tape.mse(y, target, mask.as_deref())?;
            let lv = cx.tape.value(loss).item()? as f64;
            check_finite(lv, epoch, b + 1)?;
            cx.tape.backward(loss)?;
            unet.params.collect_grads(&cx.tape);
            adam.step(&mut [("unet", &mut unet.params)])?;
            loss_sum += lv * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { 0.0 };
        let val_mse = reconstruction_mse(&mut unet, &val_inputs, &val.images, cfg.batch_size)?;
        check_finite(val_mse, epoch, 0)?;
        train_curve.push(train_loss);
        val_curve.push(val_mse);
        if best.as_ref().is_none_or(|(m, _, _)| val_mse < *m) {
            best = Some((val_mse, epoch, unet.clone()));
        }
        if on_epoch(epoch, train_loss, val_mse) == Flow::Stop {
            break;
        }
    }

    let (val_mse, best_epoch, best_unet) = match best {
        Some(b) => b,
        None => {
            let m = reconstruction_mse(&mut unet, &val_inputs, &val.images, cfg.batch_size)?;
            (m, 0, unet)
        }
    };
    let report = PretextReport {
        kind: spec.kind,
        spec: spec.clone(),
        val_mse,
        psnr: psnr_from_mse(val_mse),
        baseline_mse,
        best_epoch,
        train_curve,
        val_curve,
    };
    let metadata = json!({
        "pretext": spec,
        "best_epoch": best_epoch,
        "val_mse": val_mse,
        "baseline_mse": baseline_mse,
        "train_curve": report.train_curve,
        "val_curve": report.val_curve,
        "seed": cfg.seed,
        "train": cfg,
    });
    let mut checkpoint = unet_checkpoint(&best_unet, metadata);
    if cfg.save_optimizer {
        checkpoint.tensors.extend(adam.state_tensors());
    }
    Ok(PretrainOutcome {
        unet: best_unet,
        report,
        checkpoint,
    })
}

/// Winner of a pretext comparison and the values it was chosen from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub winner: CorruptionKind,
    pub compared: Vec<(CorruptionKind, f64)>,
    pub rule: String,
}

fn tie_rank(kind: CorruptionKind) -> u8 {
    match kind {
        CorruptionKind::GaussianNoise => 0,
        CorruptionKind::PatchMask => 1,
        CorruptionKind::Combined => 2,
    }
}

/// Lowest validation MSE wins; exact ties go to Gaussian noise.
pub fn select_pretext(reports: &[PretextReport]) -> Result<Selection> {
    if reports.len() < 2 {
        return Err(Error::Config(format!("need at least two pretext reports, got {}", reports.len())));
    }
    let winner = reports
        .iter()
        .min_by(|a, b| a.val_mse.total_cmp(&b.val_mse).then(tie_rank(a.kind).cmp(&tie_rank(b.kind))))
        .expect("non-empty");
    Ok(Selection {
        winner: winner.kind,
        compared: reports.iter().map(|r| (r.kind, r.val_mse)).collect(),
        rule: "lowest validation reconstruction MSE; ties favour gaussian_noise".into(),
    })
}

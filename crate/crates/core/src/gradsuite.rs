//! Finite-difference audit of every differentiable op and of the full
//! classifier pipeline, in double precision.

use serde::Serialize;

use crate::backbone::{BackboneConfig, StageSpec};
use crate::error::Result;
use crate::fusion::{FusedModel, FusionConfig, VariantKind};
use crate::nn::{Ctx, NormKind};
use crate::rng::SeededRng;
use crate::tensor::ops::{Padding, PoolKind};
use crate::tensor::{GradCheck, OpKind, Tape, Tensor, Var};
use crate::unet::UNetConfig;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-4;
/// Below this magnitude on both sides a gradient is indistinguishable from
/// the rounding noise of a central difference (`~ ulp(loss) / step`).
pub const ZERO_GRADIENT: f64 = 1e-10;
/// Largest fraction of pipeline coordinates whose stencil may straddle a kink.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

/// Outcome for one op (over all its shapes) or for a pipeline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub cases: usize,
    pub max_relative_error: f64,
    /// Coordinates whose stencil crossed a relu or max-pool branch change.
    pub skipped: usize,
    /// Coordinates where both gradients were below [`ZERO_GRADIENT`].
    pub zero: usize,
    pub passed: bool,
}

type Params = Vec<(String, Tensor<f64>)>;
type Body = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    params: Params,
    body: Body,
}

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(lo, hi))
}

/// Values of magnitude in [0.1, 1] with random sign: no relu kinks within a step.
fn off_zero(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.uniform_range(0.1, 1.0);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// A shuffled grid spaced 0.01 apart, so max-pool winners never swap.
fn distinct(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape.to_vec(), v).expect("sized")
}

fn named(ts: Vec<Tensor<f64>>) -> Params {
    ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
}

/// Scalar probe: MSE against a fixed random target of the output's shape.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut r = SeededRng::new(seed);
    let target = tape.constant(uniform(&mut r, &shape, -1.0, 1.0));
    tape.mse(y, target, None)
}

macro_rules! case {
    ($params:expr, |$t:ident, $p:ident| $body:expr) => {
        Case {
            params: named($params),
            body: Box::new(move |$t: &mut Tape<f64>, $p: &[Var]| $body),
        }
    };
}

fn op_cases(kind: OpKind, rng: &mut SeededRng) -> Vec<Case> {
    let shapes: [&[usize]; 3] = [&[5], &[2, 3], &[2, 3, 2, 2]];
    let mut out = Vec::new();
    for (si, shape) in shapes.iter().enumerate() {
        let s = si as u64 + 100;
        let a = uniform(rng, shape, -1.0, 1.0);
        let b = uniform(rng, shape, -1.0, 1.0);
        let pos = uniform(rng, shape, 0.5, 1.5);
        let case = match kind {
            OpKind::Add => case!(vec![a, b], |t, p| { let y = t.add(p[0], p[1])?; probe(t, y, s) }),
            OpKind::Sub => case!(vec![a, b], |t, p| { let y = t.sub(p[0], p[1])?; probe(t, y, s) }),
            OpKind::Mul => case!(vec![a, b], |t, p| { let y = t.mul(p[0], p[1])?; probe(t, y, s) }),
            OpKind::Div => case!(vec![a, pos], |t, p| { let y = t.div(p[0], p[1])?; probe(t, y, s) }),
            OpKind::AddScalar => case!(vec![a], |t, p| { let y = t.add_scalar(p[0], 0.3)?; probe(t, y, s) }),
            OpKind::MulScalar => case!(vec![a], |t, p| { let y = t.mul_scalar(p[0], -1.7)?; probe(t, y, s) }),
            OpKind::Relu => case!(vec![off_zero(rng, shape)], |t, p| { let y = t.relu(p[0])?; probe(t, y, s) }),
            OpKind::Sigmoid => case!(vec![a], |t, p| { let y = t.sigmoid(p[0])?; probe(t, y, s) }),
            OpKind::Silu => case!(vec![a], |t, p| { let y = t.silu(p[0])?; probe(t, y, s) }),
            OpKind::Exp => case!(vec![a], |t, p| { let y = t.exp(p[0])?; probe(t, y, s) }),
            OpKind::Log => case!(vec![pos], |t, p| { let y = t.log(p[0])?; probe(t, y, s) }),
            OpKind::Square => case!(vec![a], |t, p| { let y = t.square(p[0])?; probe(t, y, s) }),
            OpKind::Sum => case!(vec![a], |t, p| {
                let y = t.square(p[0])?;
                t.sum(y)
            }),
            OpKind::Mean => case!(vec![a], |t, p| {
                let y = t.square(p[0])?;
                t.mean(y)
            }),
            OpKind::Mse => {
                let n = a.len();
                let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
                if si == 0 {
                    case!(vec![a, b], |t, p| t.mse(p[0], p[1], None))
                } else {
                    case!(vec![a, b], |t, p| t.mse(p[0], p[1], Some(&mask)))
                }
            }
            OpKind::Dropout => {
                let mask: Vec<f64> = (0..a.len()).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 / 0.75 }).collect();
                case!(vec![a], |t, p| { let y = t.dropout_with_mask(p[0], mask.clone())?; probe(t, y, s) })
            }
            _ => return spatial_cases(kind, rng),
        };
        out.push(case);
    }
    out
}

/// Ops whose operands need structured shapes.
fn spatial_cases(kind: OpKind, rng: &mut SeededRng) -> Vec<Case> {
    let mut out = Vec::new();
    for si in 0..3usize {
        let s = si as u64 + 200;
        let (n, c, h) = (1 + si % 2, 2 + si, 4 + si);
        let x = uniform(rng, &[n, c, h, h], -1.0, 1.0);
        let case = match kind {
            OpKind::Matmul => {
                let (m, k, q) = [(2, 3, 4), (4, 5, 3), (1, 6, 2)][si];
                case!(vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, q], -1.0, 1.0)], |t, p| {
                    let y = t.matmul(p[0], p[1])?;
                    probe(t, y, s)
                })
            }
            OpKind::BatchedMatmul => {
                let (ta, tb) = [(false, false), (false, true), (true, false)][si];
                let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
                let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
                case!(vec![uniform(rng, &a_shape, -1.0, 1.0), uniform(rng, &b_shape, -1.0, 1.0)], |t, p| {
                    let y = t.batched_matmul(p[0], p[1], ta, tb)?;
                    probe(t, y, s)
                })
            }
            OpKind::Conv2d => {
                let (k, stride, pad) = [(3, 1, Padding::Same), (3, 2, Padding::Valid), (1, 1, Padding::Same)][si];
                let w = uniform(rng, &[3, c, k, k], -0.5, 0.5);
                let bias = uniform(rng, &[3], -0.5, 0.5);
                if si == 1 {
                    case!(vec![x, w], |t, p| { let y = t.conv2d(p[0], p[1], None, stride, pad)?; probe(t, y, s) })
                } else {
                    case!(vec![x, w, bias], |t, p| {
                        let y = t.conv2d(p[0], p[1], Some(p[2]), stride, pad)?;
                        probe(t, y, s)
                    })
                }
            }
            OpKind::DepthwiseConv2d => {
                let (k, stride, pad) = [(3, 1, Padding::Same), (3, 2, Padding::Same), (5, 1, Padding::Valid)][si];
                let w = uniform(rng, &[c, 1, k, k], -0.5, 0.5);
                let x = uniform(rng, &[n, c, h + 1, h + 1], -1.0, 1.0);
                case!(vec![x, w], |t, p| { let y = t.depthwise_conv2d(p[0], p[1], stride, pad)?; probe(t, y, s) })
            }
            OpKind::MaxPool2d => {
                let (w, st) = [(2, 2), (3, 1), (2, 1)][si];
                case!(vec![distinct(rng, &[n, c, h, h])], |t, p| {
                    let y = t.pool2d(p[0], PoolKind::Max, w, st)?;
                    probe(t, y, s)
                })
            }
            OpKind::AvgPool2d => {
                let (w, st) = [(2, 2), (3, 1), (2, 1)][si];
                case!(vec![x], |t, p| { let y = t.pool2d(p[0], PoolKind::Avg, w, st)?; probe(t, y, s) })
            }
            OpKind::GlobalAvgPool => case!(vec![x], |t, p| { let y = t.global_avg_pool(p[0])?; probe(t, y, s) }),
            OpKind::Upsample2d => {
                let f = 2 + si % 2;
                case!(vec![x], |t, p| { let y = t.upsample2d(p[0], f)?; probe(t, y, s) })
            }
            OpKind::Concat => {
                let axis = [1, 0, 3][si];
                let mut shape2 = vec![n, c, h, h];
                shape2[axis] += 1;
                case!(vec![x, uniform(rng, &shape2, -1.0, 1.0)], |t, p| {
                    let y = t.concat(&[p[0], p[1]], axis)?;
                    probe(t, y, s)
                })
            }
            OpKind::Narrow => {
                let (axis, start, len) = [(1, 1, 1), (2, 0, 2), (3, 2, 2)][si];
                case!(vec![x], |t, p| { let y = t.narrow(p[0], axis, start, len)?; probe(t, y, s) })
            }
            OpKind::Reshape => {
                let to = vec![n * c, h * h];
                case!(vec![x], |t, p| {
                    let y = t.reshape(p[0], &to)?;
                    let y = t.square(y)?;
                    probe(t, y, s)
                })
            }
            OpKind::Permute => {
                let perm = [vec![0, 2, 3, 1], vec![1, 0, 3, 2], vec![3, 2, 1, 0]][si].clone();
                case!(vec![x], |t, p| { let y = t.permute(p[0], &perm)?; probe(t, y, s) })
            }
            OpKind::BiasAdd => {
                let x = if si == 0 { uniform(rng, &[3, c], -1.0, 1.0) } else { x };
                case!(vec![x, uniform(rng, &[c], -1.0, 1.0)], |t, p| {
                    let y = t.bias_add(p[0], p[1])?;
                    let y = t.square(y)?;
                    probe(t, y, s)
                })
            }
            OpKind::ScaleChannels => case!(vec![x, uniform(rng, &[n, c], -1.0, 1.0)], |t, p| {
                let y = t.scale_channels(p[0], p[1])?;
                probe(t, y, s)
            }),
            OpKind::ChannelAffine => {
                let scale: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
                let shift: Vec<f64> = (0..c).map(|i| -0.2 * i as f64).collect();
                case!(vec![x], |t, p| {
                    let y = t.channel_affine(p[0], &scale, &shift)?;
                    let y = t.square(y)?;
                    probe(t, y, s)
                })
            }
            OpKind::Softmax => {
                let x = uniform(rng, &[n + 1, 3 + si], -2.0, 2.0);
                case!(vec![x], |t, p| { let y = t.softmax(p[0])?; probe(t, y, s) })
            }
            OpKind::BatchNorm => {
                let x = uniform(rng, &[n + 2, c, h, h], -1.0, 1.0);
                let (g, b) = (uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -0.5, 0.5));
                if si == 2 {
                    let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
                    let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.2 * i as f64).collect();
                    case!(vec![x, g, b], |t, p| {
                        let y = t.batch_norm_fixed(p[0], p[1], p[2], &mean, &var, 1e-5)?;
                        probe(t, y, s)
                    })
                } else {
                    case!(vec![x, g, b], |t, p| {
                        let y = t.batch_norm(p[0], p[1], p[2], 1e-5)?.0;
                        probe(t, y, s)
                    })
                }
            }
            OpKind::GroupNorm => {
                let c = [4, 6, 2][si];
                let groups = [2, 3, 1][si];
                let x = uniform(rng, &[n, c, h, h], -1.0, 1.0);
                let (g, b) = (uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -0.5, 0.5));
                case!(vec![x, g, b], |t, p| {
                    let y = t.group_norm(p[0], p[1], p[2], groups, 1e-5)?;
                    probe(t, y, s)
                })
            }
            OpKind::SoftmaxCrossEntropy => {
                let rows = 2 + si;
                let k = 3 + si;
                let labels: Vec<usize> = (0..rows).map(|i| (i * 2 + si) % k).collect();
                let weights: Vec<f64> = (0..k).map(|i| 0.5 + 0.25 * i as f64).collect();
                let logits = uniform(rng, &[rows, k], -2.0, 2.0);
                if si == 1 {
                    case!(vec![logits], |t, p| t.softmax_cross_entropy(p[0], &labels, Some(&weights)))
                } else {
                    case!(vec![logits], |t, p| t.softmax_cross_entropy(p[0], &labels, None))
                }
            }
            _ => unreachable!("elementwise op {kind} handled by op_cases"),
        };
        out.push(case);
    }
    out
}

/// Runs every op's cases; `fault` negates one backward rule.
pub fn check_ops(fault: Option<OpKind>) -> Result<Vec<SuiteEntry>> {
    let checker = GradCheck::new(TOLERANCE, STEP).with_sign_flip(fault);
    let mut rng = SeededRng::new(0x6772_6164);
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let cases = op_cases(kind, &mut rng);
        let mut worst: f64 = 0.0;
        for c in &cases {
            let r = checker.run(&c.body, &c.params)?;
            worst = worst.max(r.max_relative_error);
        }
        out.push(SuiteEntry {
            name: kind.name().to_string(),
            cases: cases.len(),
            max_relative_error: worst,
            skipped: 0,
            zero: 0,
            passed: worst < TOLERANCE,
        });
    }
    Ok(out)
}

/// Small configuration used for the end-to-end check.
pub fn tiny_configs() -> (UNetConfig, BackboneConfig) {
    let unet = UNetConfig {
        depth: 1,
        base_channels: 4,
        ..UNetConfig::default()
    };
    let backbone = BackboneConfig {
        stem_channels: 4,
        stages: vec![StageSpec::new(1, 4, 1, 1, 3), StageSpec::new(2, 8, 1, 2, 3)],
        feature_dim: 8,
        norm: NormKind::Batch,
        ..BackboneConfig::default()
    };
    (unet, backbone)
}

/// Cross-entropy of the whole model in training mode against fixed labels,
/// with every store trainable, checked coordinate by coordinate. Stencils
/// whose two sides take a different relu or max-pool branch than the base
/// point are not differentiable there and are skipped.
pub fn check_pipeline(variant: VariantKind, fault: Option<OpKind>) -> Result<SuiteEntry> {
    let (ucfg, bcfg) = tiny_configs();
    let fusion = FusionConfig {
        variant,
        common_dim: 6,
        head_dims: vec![8],
        dropout: 0.25,
        freeze_unet: false,
        ..FusionConfig::default()
    };
    let mut model = FusedModel::<f64>::build(&fusion, &ucfg, &bcfg, 11)?;
    model.set_input_normalization(&[0.4, 0.5, 0.6], &[0.5, 0.6, 0.7])?;
    let mut rng = SeededRng::new(12);
    let x = uniform(&mut rng, &[3, 3, 8, 8], 0.0, 1.0);
    let labels = vec![1usize, 7, 4];

    let loss = |model: &mut FusedModel<f64>, fault: Option<OpKind>, backward: bool| -> Result<(f64, Vec<usize>)> {
        let mut cx = Ctx::train(SeededRng::new(13));
        if let Some(k) = fault {
            cx.tape.inject_sign_flip(k);
        }
        let xv = cx.tape.constant(x.clone());
        let logits = model.forward(&mut cx, xv)?;
        let l = cx.tape.softmax_cross_entropy(logits, &labels, None)?;
        if backward {
            cx.tape.backward(l)?;
            for (_, s) in model.stores_mut() {
                s.collect_grads(&cx.tape);
            }
        }
        Ok((cx.tape.value(l).data()[0], cx.tape.branch_pattern()))
    };

    let (_, base) = loss(&mut model, fault, true)?;
    let mut analytic: Vec<(usize, String, Vec<f64>)> = Vec::new();
    for (si, (_, store)) in model.stores().into_iter().enumerate() {
        for (name, p) in store.iter() {
            if let Some(g) = p.value.grad() {
                analytic.push((si, name.to_string(), g.to_vec()));
            }
        }
    }
    for (_, store) in model.stores_mut() {
        store.zero_grads();
    }

    let mut worst: f64 = 0.0;
    let (mut coords, mut skipped, mut zero) = (0usize, 0usize, 0usize);
    for (si, name, grad) in &analytic {
        for (j, &a) in grad.iter().enumerate() {
            let nudge = |model: &mut FusedModel<f64>, v: f64| {
                let mut stores = model.stores_mut();
                stores[*si].1.tensor_mut(name).data_mut()[j] = v;
            };
            let orig = model.stores()[*si].1.tensor(name).data()[j];
            nudge(&mut model, orig + STEP);
            let (plus, pp) = loss(&mut model, None, false)?;
            nudge(&mut model, orig - STEP);
            let (minus, pm) = loss(&mut model, None, false)?;
            nudge(&mut model, orig);
            coords += 1;
            if pp != base || pm != base {
                skipped += 1;
                continue;
            }
            let n = (plus - minus) / (2.0 * STEP);
            if a.abs().max(n.abs()) < ZERO_GRADIENT {
                zero += 1;
                continue;
            }
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
        }
    }
    Ok(SuiteEntry {
        name: format!("pipeline/{}", variant.cli_name()),
        cases: coords,
        max_relative_error: worst,
        skipped,
        zero,
        passed: worst < TOLERANCE && (skipped as f64) <= MAX_SKIPPED_FRACTION * coords as f64,
    })
}

/// Every op plus the end-to-end pipeline of each variant.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<SuiteEntry>> {
    let mut out = check_ops(fault)?;
    for v in VariantKind::ALL {
        out.push(check_pipeline(v, fault)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let r = check_ops(None).unwrap();
        assert_eq!(r.len(), OpKind::ALL.len());
        for e in &r {
            assert!(e.passed, "{} {}", e.name, e.max_relative_error);
            assert!(e.cases >= 3);
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let r = check_ops(Some(OpKind::Upsample2d)).unwrap();
        let failed: Vec<&str> = r.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
        assert_eq!(failed, vec!["upsample2d"]);
    }

    #[test]
    fn pipeline_passes_and_catches_faults() {
        let ok = check_pipeline(VariantKind::EfficientFusionUNetAttention, None).unwrap();
        assert!(ok.passed, "{ok:?}");
        let bad = check_pipeline(VariantKind::EfficientFusionUNetAttention, Some(OpKind::Softmax)).unwrap();
        assert!(!bad.passed);
    }
}

//! A compound-scalable MBConv feature extractor in the EfficientNet family.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Ctx, NormKind, ParamStore};
use crate::rng::{streams, SeededRng};
use crate::tensor::ops::Padding;
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
    pub kernel: usize,
}

impl StageSpec {
    pub const fn new(expansion: usize, channels: usize, repeats: usize, stride: usize, kernel: usize) -> Self {
        Self {
            expansion,
            channels,
            repeats,
            stride,
            kernel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub se_ratio: f64,
    pub feature_dim: usize,
    pub activation: Activation,
    pub norm: NormKind,
}

impl Default for BackboneConfig {
    /// The "nano" member of the family.
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stages: vec![
                StageSpec::new(1, 16, 1, 1, 3),
                StageSpec::new(6, 24, 2, 2, 3),
                StageSpec::new(6, 40, 2, 2, 5),
                StageSpec::new(6, 80, 1, 2, 3),
            ],
            width_mult: 1.0,
            depth_mult: 1.0,
            se_ratio: 0.25,
            feature_dim: 128,
            activation: Activation::Silu,
            norm: NormKind::Batch,
        }
    }
}

/// Resolved geometry of one MBConv block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPlan {
    pub name: String,
    pub in_channels: usize,
    pub expanded: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
    pub se_hidden: usize,
    pub residual: bool,
}

impl BlockPlan {
    pub fn has_expansion(&self) -> bool {
        self.expanded != self.in_channels
    }
}

pub fn scale_channels(channels: usize, width_mult: f64) -> usize {
    ((channels as f64 * width_mult).round() as usize).max(8)
}

pub fn scale_repeats(repeats: usize, depth_mult: f64) -> usize {
    ((repeats as f64 * depth_mult).ceil() as usize).max(1)
}

/// Hidden width of a squeeze-and-excitation gate over `channels`.
pub fn se_hidden(channels: usize, se_ratio: f64) -> usize {
    (channels as f64 * se_ratio).ceil() as usize
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.width_mult < 0.1 || self.depth_mult < 0.1 {
            return fail("width_mult and depth_mult must be at least 0.1".into());
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return fail(format!("se_ratio {} outside (0, 1]", self.se_ratio));
        }
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.feature_dim == 0 {
            return fail("channel counts must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !matches!(s.stride, 1 | 2) {
                return fail(format!("stage {i}: stride must be 1 or 2"));
            }
            if !matches!(s.kernel, 3 | 5) {
                return fail(format!("stage {i}: kernel must be 3 or 5"));
            }
            if s.expansion == 0 || s.channels == 0 || s.repeats == 0 {
                return fail(format!("stage {i}: expansion, channels and repeats must be positive"));
            }
        }
        Ok(())
    }

    pub fn stem_width(&self) -> usize {
        scale_channels(self.stem_channels, self.width_mult)
    }

    /// Every block after scaling; stride applies to the first block of a stage.
    pub fn block_plans(&self) -> Vec<BlockPlan> {
        let mut plans = Vec::new();
        let mut cin = self.stem_width();
        for (si, s) in self.stages.iter().enumerate() {
            let cout = scale_channels(s.channels, self.width_mult);
            for bi in 0..scale_repeats(s.repeats, self.depth_mult) {
                let stride = if bi == 0 { s.stride } else { 1 };
                let expanded = cin * s.expansion;
                plans.push(BlockPlan {
                    name: format!("s{si}.b{bi}"),
                    in_channels: cin,
                    expanded,
                    out_channels: cout,
                    stride,
                    kernel: s.kernel,
                    se_hidden: se_hidden(expanded, self.se_ratio),
                    residual: stride == 1 && cin == cout,
                });
                cin = cout;
            }
        }
        plans
    }

    /// Total downsampling factor from input to the final feature map.
    pub fn cumulative_stride(&self) -> usize {
        2 * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::invalid("backbone", format!("expected [N, C, H, W], got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::invalid(
                "backbone",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        let s = self.cumulative_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("spatial dims {h}x{w} not divisible by cumulative stride {s}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Real = f32> {
    pub config: BackboneConfig,
    pub params: ParamStore<T>,
    plans: Vec<BlockPlan>,
}

fn activate<T: Real>(cx: &mut Ctx<T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Silu => cx.tape.silu(x),
        Activation::Relu => cx.tape.relu(x),
    }
}

pub fn init_se<T: Real>(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, channels: usize, hidden: usize) {
    nn::init_dense(store, rng, &format!("{name}.reduce"), channels, hidden);
    nn::init_dense(store, rng, &format!("{name}.expand"), hidden, channels);
}

/// Squeeze-and-excitation: `x * sigmoid(dense(relu(dense(gap(x)))))` per channel.
pub fn se_gate<T: Real>(cx: &mut Ctx<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let squeezed = cx.tape.global_avg_pool(x)?;
    let h = nn::dense(cx, store, &format!("{name}.reduce"), squeezed)?;
    let h = cx.tape.relu(h)?;
    let h = nn::dense(cx, store, &format!("{name}.expand"), h)?;
    let gate = cx.tape.sigmoid(h)?;
    cx.tape.scale_channels(x, gate)
}

impl<T: Real> Backbone<T> {
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::with_stream(seed, streams::INIT_BACKBONE);
        let mut p = ParamStore::new();
        let norm = config.norm;
        let stem = config.stem_width();
        nn::init_conv(&mut p, &mut rng, "stem.conv", stem, config.in_channels, 3, false);
        nn::init_norm(&mut p, "stem.norm", stem, norm);
        let plans = config.block_plans();
        for b in &plans {
            let n = &b.name;
            if b.has_expansion() {
                nn::init_conv(&mut p, &mut rng, &format!("{n}.expand"), b.expanded, b.in_channels, 1, false);
                nn::init_norm(&mut p, &format!("{n}.expand_norm"), b.expanded, norm);
            }
            nn::init_depthwise(&mut p, &mut rng, &format!("{n}.dw"), b.expanded, b.kernel);
            nn::init_norm(&mut p, &format!("{n}.dw_norm"), b.expanded, norm);
            init_se(&mut p, &mut rng, &format!("{n}.se"), b.expanded, b.se_hidden);
            nn::init_conv(&mut p, &mut rng, &format!("{n}.project"), b.out_channels, b.expanded, 1, false);
            nn::init_norm(&mut p, &format!("{n}.project_norm"), b.out_channels, norm);
        }
        let last = plans.last().map_or(stem, |b| b.out_channels);
        nn::init_conv(&mut p, &mut rng, "head.conv", config.feature_dim, last, 1, false);
        nn::init_norm(&mut p, "head.norm", config.feature_dim, norm);
        Ok(Self {
            config: config.clone(),
            params: p,
            plans,
        })
    }

    pub fn plans(&self) -> &[BlockPlan] {
        &self.plans
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn block(&mut self, cx: &mut Ctx<T>, plan: &BlockPlan, x: Var) -> Result<Var> {
        let (norm, act) = (self.config.norm, self.config.activation);
        let n = &plan.name;
        let p = &mut self.params;
        let mut h = x;
        if plan.has_expansion() {
            h = nn::conv(cx, p, &format!("{n}.expand"), h, 1, Padding::Valid)?;
            h = nn::norm(cx, p, &format!("{n}.expand_norm"), h, norm)?;
            h = activate(cx, h, act)?;
        }
        h = nn::depthwise(cx, p, &format!("{n}.dw"), h, plan.stride)?;
        h = nn::norm(cx, p, &format!("{n}.dw_norm"), h, norm)?;
        h = activate(cx, h, act)?;
        h = se_gate(cx, p, &format!("{n}.se"), h)?;
        h = nn::conv(cx, p, &format!("{n}.project"), h, 1, Padding::Valid)?;
        h = nn::norm(cx, p, &format!("{n}.project_norm"), h, norm)?;
        if plan.residual {
            h = cx.tape.add(h, x)?;
        }
        Ok(h)
    }

    /// Features `[N, feature_dim]`.
    pub fn forward(&mut self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.config.check_input(cx.tape.shape(x))?;
        self.params.bind(&mut cx.tape);
        let (norm, act) = (self.config.norm, self.config.activation);
        let mut h = nn::conv(cx, &self.params, "stem.conv", x, 2, Padding::Same)?;
        h = nn::norm(cx, &mut self.params, "stem.norm", h, norm)?;
        h = activate(cx, h, act)?;
        for plan in self.plans.clone() {
            h = self.block(cx, &plan, h)?;
        }
        h = nn::conv(cx, &self.params, "head.conv", h, 1, Padding::Valid)?;
        h = nn::norm(cx, &mut self.params, "head.norm", h, norm)?;
        h = activate(cx, h, act)?;
        cx.tape.global_avg_pool(h)
    }

    /// Evaluation-mode features of a plain tensor batch.
    pub fn features(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::eval();
        let x = cx.tape.constant(batch.clone());
        let y = self.forward(&mut cx, x)?;
        Ok(cx.tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_rules() {
        assert_eq!(scale_channels(16, 1.0), 16);
        assert_eq!(scale_channels(16, 0.25), 8);
        assert_eq!(scale_channels(40, 1.5), 60);
        assert_eq!(scale_repeats(2, 1.1), 3);
        assert_eq!(scale_repeats(1, 0.1), 1);
    }

    #[test]
    fn nano_size_and_stride() {
        let b = Backbone::<f32>::build(&BackboneConfig::default(), 1).unwrap();
        let n = b.parameter_count();
        assert!((150_000..250_000).contains(&n), "{n}");
        assert_eq!(64 % b.config.cumulative_stride(), 0);
    }

    #[test]
    fn forward_shape() {
        let cfg = BackboneConfig::default();
        let mut b = Backbone::<f32>::build(&cfg, 1).unwrap();
        let mut r = SeededRng::new(2);
        let x = Tensor::from_fn(vec![2, 3, 32, 32], |_| r.uniform() as f32);
        assert_eq!(b.features(&x).unwrap().shape(), &[2, 128]);
        let bad = Tensor::<f32>::zeros(vec![1, 3, 20, 20]);
        assert!(b.features(&bad).is_err());
    }

    #[test]
    fn invalid_config() {
        let mut cfg = BackboneConfig {
            se_ratio: 0.0,
            ..BackboneConfig::default()
        };
        assert!(Backbone::<f32>::build(&cfg, 1).is_err());
        cfg.se_ratio = 0.25;
        cfg.stages[1].stride = 3;
        assert!(Backbone::<f32>::build(&cfg, 1).is_err());
    }

    #[test]
    fn zeroed_se_halves_input() {
        let mut rng = SeededRng::new(3);
        let mut store = ParamStore::<f64>::new();
        init_se(&mut store, &mut rng, "se", 4, 1);
        for (_, p) in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let x = Tensor::from_fn(vec![2, 4, 3, 3], |i| i as f64 - 20.0);
        let mut cx = Ctx::eval();
        store.bind(&mut cx.tape);
        let xv = cx.tape.constant(x.clone());
        let y = se_gate(&mut cx, &store, "se", xv).unwrap();
        for (a, b) in cx.tape.value(y).data().iter().zip(x.data()) {
            assert_eq!(*a, b / 2.0);
        }
    }
}

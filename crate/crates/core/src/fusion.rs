//! The four classifier variants: U-Net features only, backbone features only,
//! and the two ways of fusing both before the dense head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Ctx, ParamStore, Role};
use crate::rng::{streams, SeededRng};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::unet::{UNet, UNetConfig};

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    #[serde(rename = "unet")]
    UNetOnly,
    #[serde(rename = "efficient")]
    EfficientOnly,
    #[serde(rename = "fusion")]
    EfficientFusionUNet,
    #[serde(rename = "fusion-attention")]
    EfficientFusionUNetAttention,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::UNetOnly,
        VariantKind::EfficientOnly,
        VariantKind::EfficientFusionUNet,
        VariantKind::EfficientFusionUNetAttention,
    ];

    /// Short identifier used on the command line and in file names.
    pub fn cli_name(self) -> &'static str {
        match self {
            VariantKind::UNetOnly => "unet",
            VariantKind::EfficientOnly => "efficient",
            VariantKind::EfficientFusionUNet => "fusion",
            VariantKind::EfficientFusionUNetAttention => "fusion-attention",
        }
    }

    /// Human-readable model name.
    pub fn title(self) -> &'static str {
        match self {
            VariantKind::UNetOnly => "U-Net",
            VariantKind::EfficientOnly => "EfficientNet",
            VariantKind::EfficientFusionUNet => "Efficient Fusion U-Net",
            VariantKind::EfficientFusionUNetAttention => "Efficient Fusion U-Net with Attention",
        }
    }

    pub fn uses_unet(self) -> bool {
        self != VariantKind::EfficientOnly
    }

    pub fn uses_backbone(self) -> bool {
        self != VariantKind::UNetOnly
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.cli_name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.cli_name()).collect();
            Error::Config(format!("unknown variant {s:?}; valid: {}", names.join(", ")))
        })
    }
}

/// What the backbone sees in the fusion variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInput {
    #[default]
    Reconstruction,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: VariantKind,
    pub common_dim: usize,
    pub head_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout: f64,
    pub backbone_input: BackboneInput,
    pub freeze_unet: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: VariantKind::EfficientFusionUNet,
            common_dim: 128,
            head_dims: vec![256, 64],
            num_classes: NUM_CLASSES,
            dropout: 0.3,
            backbone_input: BackboneInput::Reconstruction,
            freeze_unet: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "fusion: num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.head_dims.is_empty() || self.head_dims.contains(&0) {
            return Err(Error::Config("fusion: head_dims must be non-empty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("fusion: dropout {} outside [0, 1)", self.dropout)));
        }
        if self.common_dim == 0 {
            return Err(Error::Config("fusion: common_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Concatenation along the feature axis, U-Net features first.
pub fn fuse_concat<T: Real>(tape: &mut Tape<T>, unet: Var, backbone: Var) -> Result<Var> {
    tape.concat(&[unet, backbone], 1)
}

pub fn init_attention_fusion<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    du: usize,
    de: usize,
    common: usize,
) {
    nn::init_dense(store, rng, "fusion.proj_u", du, common);
    nn::init_dense(store, rng, "fusion.proj_e", de, common);
    let limit = (1.0 / common as f64).sqrt();
    for name in ["fusion.score_u", "fusion.score_e"] {
        let t = Tensor::from_fn(vec![common, 1], |_| T::from_f64_lossy(rng.uniform_range(-limit, limit)));
        store.insert(name, t, Role::Trainable);
    }
}

/// Two-branch softmax gating. Returns the fused `[N, common]` features and the
/// `[N, 2]` weights `(alpha_u, alpha_e)`.
pub fn fuse_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    unet: Var,
    backbone: Var,
) -> Result<(Var, Var)> {
    let pu = tape.linear(unet, store.var("fusion.proj_u.weight"), Some(store.var("fusion.proj_u.bias")))?;
    let pe = tape.linear(backbone, store.var("fusion.proj_e.weight"), Some(store.var("fusion.proj_e.bias")))?;
    let su = tape.matmul(pu, store.var("fusion.score_u"))?;
    let se = tape.matmul(pe, store.var("fusion.score_e"))?;
    let scores = tape.concat(&[su, se], 1)?;
    let alpha = tape.softmax(scores)?;
    let weighted = |tape: &mut Tape<T>, p: Var, i: usize| -> Result<Var> {
        let &[n, c] = tape.shape(p) else { unreachable!() };
        let a = tape.narrow(alpha, 1, i, 1)?;
        let p3 = tape.reshape(p, &[n, 1, c])?;
        let scaled = tape.scale_channels(p3, a)?;
        tape.reshape(scaled, &[n, c])
    };
    let wu = weighted(tape, pu, 0)?;
    let we = weighted(tape, pe, 1)?;
    Ok((tape.add(wu, we)?, alpha))
}

/// Argmax of each row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Outputs of a frozen U-Net precomputed for a batch.
#[derive(Clone, Debug)]
pub struct UNetCache<T: Real> {
    pub reconstruction: Tensor<T>,
    pub vector: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel<T: Real = f32> {
    pub config: FusionConfig,
    pub unet: Option<UNet<T>>,
    pub backbone: Option<Backbone<T>>,
    /// Fusion projections, classification head and input statistics.
    pub head: ParamStore<T>,
}

const NORM_MEAN: &str = "input_norm.mean";
const NORM_STD: &str = "input_norm.std";

impl<T: Real> FusedModel<T> {
    pub fn build(
        config: &FusionConfig,
        unet_config: &UNetConfig,
        backbone_config: &BackboneConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let variant = config.variant;
        let mut unet = if variant.uses_unet() {
            Some(UNet::build(unet_config, seed)?)
        } else {
            None
        };
        if let Some(u) = unet.as_mut() {
            u.params.set_frozen(config.freeze_unet);
        }
        let backbone = if variant.uses_backbone() {
            Some(Backbone::build(backbone_config, seed)?)
        } else {
            None
        };
        let du = unet_config.bottleneck_width();
        let de = backbone_config.feature_dim;
        let mut rng = SeededRng::with_stream(seed, streams::INIT_HEAD);
        let mut head = ParamStore::new();
        if backbone.is_some() {
            let c = backbone_config.in_channels;
            head.insert(NORM_MEAN, Tensor::zeros(vec![c]), Role::Buffer);
            head.insert(NORM_STD, Tensor::ones(vec![c]), Role::Buffer);
        }
        let fused_dim = match variant {
            VariantKind::UNetOnly => du,
            VariantKind::EfficientOnly => de,
            VariantKind::EfficientFusionUNet => du + de,
            VariantKind::EfficientFusionUNetAttention => {
                init_attention_fusion(&mut head, &mut rng, du, de, config.common_dim);
                config.common_dim
            }
        };
        let mut width = fused_dim;
        for (i, &h) in config.head_dims.iter().enumerate() {
            nn::init_dense(&mut head, &mut rng, &format!("head.fc{i}"), width, h);
            width = h;
        }
        nn::init_dense(&mut head, &mut rng, "head.out", width, config.num_classes);
        Ok(Self {
            config: config.clone(),
            unet,
            backbone,
            head,
        })
    }

    pub fn variant(&self) -> VariantKind {
        self.config.variant
    }

    pub fn unet_frozen(&self) -> bool {
        self.unet.as_ref().is_some_and(|u| u.params.is_frozen())
    }

    pub fn set_unet_frozen(&mut self, frozen: bool) {
        self.config.freeze_unet = frozen;
        if let Some(u) = self.unet.as_mut() {
            u.params.set_frozen(frozen);
        }
    }

    /// Replaces the U-Net weights, keeping this model's freeze setting.
    pub fn set_unet(&mut self, mut unet: UNet<T>) -> Result<()> {
        let Some(slot) = self.unet.as_mut() else {
            return Err(Error::Config(format!("variant {} has no U-Net", self.config.variant)));
        };
        if slot.config != unet.config {
            return Err(Error::Config("U-Net configuration does not match the model".into()));
        }
        unet.params.set_frozen(self.config.freeze_unet);
        *slot = unet;
        Ok(())
    }

    /// Per-channel statistics applied to the backbone input as `(v - mean) / std`.
    pub fn set_input_normalization(&mut self, mean: &[T], std: &[T]) -> Result<()> {
        if !self.head.contains(NORM_MEAN) {
            return Ok(());
        }
        let c = self.head.tensor(NORM_MEAN).len();
        if mean.len() != c || std.len() != c || std.iter().any(|&s| s <= T::zero()) {
            return Err(Error::invalid("set_input_normalization", "expected positive per-channel statistics"));
        }
        self.head.tensor_mut(NORM_MEAN).data_mut().copy_from_slice(mean);
        self.head.tensor_mut(NORM_STD).data_mut().copy_from_slice(std);
        Ok(())
    }

    /// Every parameter store with its name prefix.
    pub fn stores(&self) -> Vec<(&'static str, &ParamStore<T>)> {
        let mut out = Vec::new();
        if let Some(u) = &self.unet {
            out.push(("unet", &u.params));
        }
        if let Some(b) = &self.backbone {
            out.push(("backbone", &b.params));
        }
        out.push(("head", &self.head));
        out
    }

    pub fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParamStore<T>)> {
        let mut out = Vec::new();
        if let Some(u) = &mut self.unet {
            out.push(("unet", &mut u.params));
        }
        if let Some(b) = &mut self.backbone {
            out.push(("backbone", &mut b.params));
        }
        out.push(("head", &mut self.head));
        out
    }

    /// Frozen-U-Net outputs for `batch`, computed in evaluation mode.
    pub fn unet_cache(&mut self, batch: &Tensor<T>) -> Result<Option<UNetCache<T>>> {
        match self.unet.as_mut() {
            Some(u) if u.params.is_frozen() => {
                let (reconstruction, vector) = u.infer(batch)?;
                Ok(Some(UNetCache { reconstruction, vector }))
            }
            _ => Ok(None),
        }
    }

    fn normalize(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mean = self.head.tensor(NORM_MEAN).data();
        let std = self.head.tensor(NORM_STD).data();
        let scale: Vec<T> = std.iter().map(|&s| T::one() / s).collect();
        let shift: Vec<T> = mean.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
        tape.channel_affine(x, &scale, &shift)
    }

    /// Logits `[N, num_classes]` for a raw `[N, C, H, W]` batch in [0, 1].
    pub fn forward(&mut self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.forward_cached(cx, x, None)
    }

    /// As [`forward`](Self::forward), taking the U-Net outputs from `cache`
    /// when given. Only valid for a frozen U-Net.
    pub fn forward_cached(&mut self, cx: &mut Ctx<T>, x: Var, cache: Option<&UNetCache<T>>) -> Result<Var> {
        let variant = self.config.variant;
        let (u_vec, recon) = match (self.unet.as_mut(), cache) {
            (None, _) => (None, None),
            (Some(u), Some(c)) => {
                if !u.params.is_frozen() {
                    return Err(Error::invalid("forward_cached", "cached outputs require a frozen U-Net"));
                }
                (
                    Some(cx.tape.constant(c.vector.clone())),
                    Some(cx.tape.constant(c.reconstruction.clone())),
                )
            }
            (Some(u), None) => {
                if variant == VariantKind::UNetOnly {
                    (Some(u.encode(cx, x)?.vector), None)
                } else {
                    let out = u.forward_full(cx, x)?;
                    (Some(out.features.vector), Some(out.reconstruction))
                }
            }
        };
        let e_vec = match self.backbone.is_some() {
            false => None,
            true => {
                let input = match (variant, self.config.backbone_input, recon) {
                    (VariantKind::EfficientOnly, _, _) | (_, BackboneInput::Raw, _) => x,
                    (_, BackboneInput::Reconstruction, Some(r)) => r,
                    (_, BackboneInput::Reconstruction, None) => {
                        return Err(Error::invalid("forward", "missing U-Net reconstruction"));
                    }
                };
                let input = self.normalize(&mut cx.tape, input)?;
                let b = self.backbone.as_mut().expect("checked");
                Some(b.forward(cx, input)?)
            }
        };
        self.head.bind(&mut cx.tape);
        let mut h = match (variant, u_vec, e_vec) {
            (VariantKind::UNetOnly, Some(u), _) => u,
            (VariantKind::EfficientOnly, _, Some(e)) => e,
            (VariantKind::EfficientFusionUNet, Some(u), Some(e)) => fuse_concat(&mut cx.tape, u, e)?,
            (VariantKind::EfficientFusionUNetAttention, Some(u), Some(e)) => {
                fuse_attention(&mut cx.tape, &self.head, u, e)?.0
            }
            _ => return Err(Error::invalid("forward", format!("variant {variant} is missing a component"))),
        };
        for i in 0..self.config.head_dims.len() {
            h = nn::dense(cx, &self.head, &format!("head.fc{i}"), h)?;
            h = cx.tape.relu(h)?;
            h = cx.dropout(h, self.config.dropout)?;
        }
        nn::dense(cx, &self.head, "head.out", h)
    }

    /// Evaluation-mode logits of a plain tensor batch.
    pub fn logits(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::eval();
        let x = cx.tape.constant(batch.clone());
        let y = self.forward(&mut cx, x)?;
        Ok(cx.tape.value(y).clone())
    }

    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StageSpec;

    pub(crate) fn tiny_configs() -> (UNetConfig, BackboneConfig) {
        let unet = UNetConfig {
            depth: 1,
            base_channels: 4,
            ..UNetConfig::default()
        };
        let backbone = BackboneConfig {
            stem_channels: 8,
            stages: vec![StageSpec::new(1, 8, 1, 1, 3), StageSpec::new(2, 8, 1, 2, 3)],
            feature_dim: 16,
            ..BackboneConfig::default()
        };
        (unet, backbone)
    }

    fn batch(n: usize) -> Tensor<f32> {
        let mut r = SeededRng::new(4);
        Tensor::from_fn(vec![n, 3, 8, 8], |_| r.uniform() as f32)
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in VariantKind::ALL {
            assert_eq!(v.cli_name().parse::<VariantKind>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.cli_name()));
        }
        let err = "resnet".parse::<VariantKind>().unwrap_err().to_string();
        assert!(err.contains("fusion-attention"), "{err}");
    }

    #[test]
    fn every_variant_yields_ten_logits() {
        let (u, b) = tiny_configs();
        for v in VariantKind::ALL {
            let cfg = FusionConfig {
                variant: v,
                common_dim: 8,
                head_dims: vec![8],
                ..FusionConfig::default()
            };
            let mut m = FusedModel::<f32>::build(&cfg, &u, &b, 1).unwrap();
            assert_eq!(m.logits(&batch(3)).unwrap().shape(), &[3, 10], "{v}");
            assert_eq!(m.unet.is_some(), v.uses_unet());
            assert_eq!(m.backbone.is_some(), v.uses_backbone());
        }
    }

    #[test]
    fn concat_order_and_length() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let c = fuse_concat(&mut t, a, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn attention_weights_examples() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(1);
        init_attention_fusion(&mut store, &mut rng, 2, 2, 2);
        // identity projections, scoring picks the first coordinate
        for (name, v) in [
            ("fusion.proj_u.weight", vec![1.0, 0.0, 0.0, 1.0]),
            ("fusion.proj_e.weight", vec![1.0, 0.0, 0.0, 1.0]),
            ("fusion.score_u", vec![1.0, 0.0]),
            ("fusion.score_e", vec![1.0, 0.0]),
        ] {
            store.tensor_mut(name).data_mut().copy_from_slice(&v);
        }
        let run = |store: &mut ParamStore<f64>, u: [f64; 2], e: [f64; 2]| {
            let mut t = Tape::new();
            store.bind(&mut t);
            let uv = t.constant(Tensor::new(vec![1, 2], u.to_vec()).unwrap());
            let ev = t.constant(Tensor::new(vec![1, 2], e.to_vec()).unwrap());
            let (out, alpha) = fuse_attention(&mut t, store, uv, ev).unwrap();
            (t.value(out).data().to_vec(), t.value(alpha).data().to_vec())
        };
        let (out, alpha) = run(&mut store, [0.0, 2.0], [0.0, 4.0]);
        assert_eq!(alpha, vec![0.5, 0.5]);
        assert_eq!(out, vec![0.0, 3.0]);
        let (_, alpha) = run(&mut store, [1.0, 0.0], [0.0, 0.0]);
        assert!((alpha[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((alpha[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let (out, alpha) = run(&mut store, [20.0, 1.0], [0.0, 5.0]);
        assert!(alpha[0] > 0.9999);
        assert!((out[0] - 20.0).abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn argmax_tie_rule() {
        let mut row = vec![0.0f32; 10];
        row[9] = 5.0;
        let t = Tensor::new(vec![2, 10], [row, vec![1.0; 10]].concat()).unwrap();
        assert_eq!(argmax_rows(&t), vec![9, 0]);
    }

    #[test]
    fn cached_forward_matches_direct() {
        let (u, b) = tiny_configs();
        let cfg = FusionConfig {
            common_dim: 8,
            head_dims: vec![8],
            ..FusionConfig::default()
        };
        let mut m = FusedModel::<f32>::build(&cfg, &u, &b, 3).unwrap();
        let x = batch(2);
        let direct = m.logits(&x).unwrap();
        let cache = m.unet_cache(&x).unwrap().unwrap();
        let mut cx = Ctx::eval();
        let xv = cx.tape.constant(x.clone());
        let y = m.forward_cached(&mut cx, xv, Some(&cache)).unwrap();
        assert_eq!(cx.tape.value(y), &direct);
    }
}

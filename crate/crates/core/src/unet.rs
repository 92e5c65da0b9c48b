//! Convolutional U-Net with an optional self-attention bottleneck, used both
//! as the reconstruction model for pretraining and as a feature extractor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Ctx, NormKind, ParamStore};
use crate::rng::{streams, SeededRng};
use crate::tensor::ops::Padding;
use crate::tensor::{Real, Tensor, Var};

pub const ATTENTION_HEADS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub attention_bottleneck: bool,
    pub norm: NormKind,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            depth: 3,
            attention_bottleneck: true,
            norm: NormKind::Batch,
            out_channels: 3,
        }
    }
}

impl UNetConfig {
    /// Channel width at `level`; level `depth` is the bottleneck.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width(self.depth)
    }

    /// Spatial dimensions must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("unet: {m}")));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.depth > 8 {
            return fail(format!("depth {} is unreasonably large", self.depth));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.attention_bottleneck && self.bottleneck_width() % ATTENTION_HEADS != 0 {
            return fail(format!(
                "bottleneck width {} not divisible by {ATTENTION_HEADS} attention heads",
                self.bottleneck_width()
            ));
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::invalid("unet", format!("expected [N, C, H, W], got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::invalid(
                "unet",
                format!("expected {} input channels, got {c}", self.in_channels),
            ));
        }
        let m = self.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "unet",
                format!("spatial dims {h}x{w} not divisible by 2^{} = {m}", self.depth),
            ));
        }
        Ok(())
    }
}

/// Encoder output: the pooled bottleneck and the per-level skip maps.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    /// `[N, bottleneck_width]`.
    pub vector: Var,
    /// Bottleneck map before pooling.
    pub bottleneck: Var,
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct UNetOutput {
    pub reconstruction: Var,
    pub features: EncoderFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T: Real = f32> {
    pub config: UNetConfig,
    pub params: ParamStore<T>,
}

fn double_conv_init<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    name: &str,
    cin: usize,
    cout: usize,
    norm: NormKind,
) {
    nn::init_conv(store, rng, &format!("{name}.conv1"), cout, cin, 3, false);
    nn::init_norm(store, &format!("{name}.norm1"), cout, norm);
    nn::init_conv(store, rng, &format!("{name}.conv2"), cout, cout, 3, false);
    nn::init_norm(store, &format!("{name}.norm2"), cout, norm);
}

fn double_conv<T: Real>(
    cx: &mut Ctx<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: Var,
    norm: NormKind,
) -> Result<Var> {
    let mut h = x;
    for i in 1..=2 {
        h = nn::conv(cx, store, &format!("{name}.conv{i}"), h, 1, Padding::Same)?;
        h = nn::norm(cx, store, &format!("{name}.norm{i}"), h, norm)?;
        h = cx.tape.relu(h)?;
    }
    Ok(h)
}

impl<T: Real> UNet<T> {
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::with_stream(seed, streams::INIT_UNET);
        let mut p = ParamStore::new();
        let norm = config.norm;
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            double_conv_init(&mut p, &mut rng, &format!("enc{level}"), cin, config.width(level), norm);
            cin = config.width(level);
        }
        let bw = config.bottleneck_width();
        double_conv_init(&mut p, &mut rng, "mid", cin, bw, norm);
        if config.attention_bottleneck {
            // a key bias only shifts each query's scores and cancels in the softmax
            for proj in ["q", "k", "v", "o"] {
                nn::init_linear(&mut p, &mut rng, &format!("mid.attn.{proj}"), bw, bw, proj != "k");
            }
        }
        for level in (0..config.depth).rev() {
            let w = config.width(level);
            double_conv_init(&mut p, &mut rng, &format!("dec{level}"), w + config.width(level + 1), w, norm);
        }
        nn::init_conv(&mut p, &mut rng, "out", config.out_channels, config.width(0), 1, true);
        Ok(Self { config: config.clone(), params: p })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Multi-head self-attention over the spatial positions of `x`, added residually.
    fn attention(&mut self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let &[n, c, h, w] = cx.tape.shape(x) else { unreachable!() };
        let l = h * w;
        let heads = ATTENTION_HEADS;
        let d = c / heads;
        let seq = cx.tape.reshape(x, &[n, c, l])?;
        let seq = cx.tape.permute(seq, &[0, 2, 1])?;
        let flat = cx.tape.reshape(seq, &[n * l, c])?;
        let split = |cx: &mut Ctx<T>, name: &str| -> Result<Var> {
            let y = nn::dense(cx, &self.params, &format!("mid.attn.{name}"), flat)?;
            let y = cx.tape.reshape(y, &[n, l, heads, d])?;
            let y = cx.tape.permute(y, &[0, 2, 1, 3])?;
            cx.tape.reshape(y, &[n * heads, l, d])
        };
        let q = split(cx, "q")?;
        let k = split(cx, "k")?;
        let v = split(cx, "v")?;
        let scores = cx.tape.batched_matmul(q, k, false, true)?;
        let scores = cx.tape.mul_scalar(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()))?;
        let attn = cx.tape.softmax(scores)?;
        let ctx = cx.tape.batched_matmul(attn, v, false, false)?;
        let ctx = cx.tape.reshape(ctx, &[n, heads, l, d])?;
        let ctx = cx.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = cx.tape.reshape(ctx, &[n * l, c])?;
        let out = nn::dense(cx, &self.params, "mid.attn.o", ctx)?;
        let out = cx.tape.reshape(out, &[n, l, c])?;
        let out = cx.tape.permute(out, &[0, 2, 1])?;
        let out = cx.tape.reshape(out, &[n, c, h, w])?;
        cx.tape.add(x, out)
    }

    /// Encoder and bottleneck only.
    pub fn encode(&mut self, cx: &mut Ctx<T>, x: Var) -> Result<EncoderFeatures> {
        self.config.check_input(cx.tape.shape(x))?;
        self.params.bind(&mut cx.tape);
        let norm = self.config.norm;
        let mut levels = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for level in 0..self.config.depth {
            let skip = double_conv(cx, &mut self.params, &format!("enc{level}"), h, norm)?;
            levels.push(skip);
            h = cx.tape.max_pool2d(skip, 2, 2)?;
        }
        h = double_conv(cx, &mut self.params, "mid", h, norm)?;
        if self.config.attention_bottleneck {
            h = self.attention(cx, h)?;
        }
        let vector = cx.tape.global_avg_pool(h)?;
        Ok(EncoderFeatures {
            vector,
            bottleneck: h,
            levels,
        })
    }

    fn decode(&mut self, cx: &mut Ctx<T>, features: &EncoderFeatures, zero_skips: bool) -> Result<Var> {
        let norm = self.config.norm;
        let mut h = features.bottleneck;
        for level in (0..self.config.depth).rev() {
            let up = cx.tape.upsample2d(h, 2)?;
            let mut skip = features.levels[level];
            if zero_skips {
                skip = cx.tape.mul_scalar(skip, T::zero())?;
            }
            let merged = cx.tape.concat(&[skip, up], 1)?;
            h = double_conv(cx, &mut self.params, &format!("dec{level}"), merged, norm)?;
        }
        let out = nn::conv(cx, &self.params, "out", h, 1, Padding::Valid)?;
        cx.tape.sigmoid(out)
    }

    pub fn forward_full(&mut self, cx: &mut Ctx<T>, x: Var) -> Result<UNetOutput> {
        let features = self.encode(cx, x)?;
        let reconstruction = self.decode(cx, &features, false)?;
        Ok(UNetOutput {
            reconstruction,
            features,
        })
    }

    /// Reconstruction `[N, out_channels, H, W]` with values in (0, 1).
    pub fn forward(&mut self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        Ok(self.forward_full(cx, x)?.reconstruction)
    }

    /// Forward pass with every skip tensor multiplied by zero.
    #[doc(hidden)]
    pub fn forward_without_skips(&mut self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let features = self.encode(cx, x)?;
        self.decode(cx, &features, true)
    }

    /// Evaluation-mode reconstruction of a plain tensor batch.
    pub fn reconstruct(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::eval();
        let x = cx.tape.constant(batch.clone());
        let y = self.forward(&mut cx, x)?;
        Ok(cx.tape.value(y).clone())
    }

    /// Evaluation-mode pass returning `(reconstruction, bottleneck vector)`.
    pub fn infer(&mut self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut cx = Ctx::eval();
        let x = cx.tape.constant(batch.clone());
        let out = self.forward_full(&mut cx, x)?;
        Ok((
            cx.tape.value(out.reconstruction).clone(),
            cx.tape.value(out.features.vector).clone(),
        ))
    }
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio for images in [0, 1], capped at 100 dB.
pub fn psnr<T: Real>(prediction: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape("psnr", prediction.shape(), target.shape()));
    }
    let n = prediction.len() as f64;
    let mse = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(depth: usize, base: usize, attention: bool) -> UNetConfig {
        UNetConfig {
            depth,
            base_channels: base,
            attention_bottleneck: attention,
            ..UNetConfig::default()
        }
    }

    fn batch(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut r = SeededRng::new(seed);
        Tensor::from_fn(vec![n, 3, size, size], |_| r.uniform() as f32)
    }

    #[test]
    fn shapes_and_range() {
        let mut m = UNet::<f32>::build(&small(2, 4, true), 1).unwrap();
        let out = m.reconstruct(&batch(2, 16, 3)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 16, 16]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn bottleneck_width_formula() {
        let cfg = small(4, 16, true);
        assert_eq!(cfg.bottleneck_width(), 256);
        let mut m = UNet::<f32>::build(&small(1, 4, false), 2).unwrap();
        assert!(m.parameter_count() > 0);
        let (_, v) = m.infer(&batch(1, 8, 4)).unwrap();
        assert_eq!(v.shape(), &[1, 8]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut m = UNet::<f32>::build(&small(2, 4, false), 1).unwrap();
        assert!(m.reconstruct(&batch(1, 10, 1)).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(UNet::<f32>::build(&small(0, 4, false), 1).is_err());
        let mut c = small(1, 3, true);
        c.base_channels = 3; // bottleneck 6, not divisible by 4
        assert!(UNet::<f32>::build(&c, 1).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = UNet::<f32>::build(&small(2, 4, true), 9).unwrap();
        let b = UNet::<f32>::build(&small(2, 4, true), 9).unwrap();
        let c = UNet::<f32>::build(&small(2, 4, true), 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::full(vec![4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(0.0025) - 26.0206).abs() < 1e-4);
        assert!(psnr(&a, &Tensor::zeros(vec![3])).is_err());
    }
}

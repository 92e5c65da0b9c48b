//! Pretext-task input corruptions: random patch masking and additive
//! Gaussian noise, plus the reconstruction loss that scores a model on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::ops::dims4;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    PatchMask,
    GaussianNoise,
    /// Noise over the whole image, then patch masking on top.
    Combined,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::PatchMask => "patch_mask",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Combined => "combined",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPolicy {
    /// Average over corrupted pixels only.
    MaskedOnly,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub fill_value: f64,
    pub sigma: f64,
    pub clamp: bool,
    /// Overrides the kind's default policy.
    pub loss_policy: Option<LossPolicy>,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self::gaussian_noise(0.1)
    }
}

impl CorruptionSpec {
    pub fn patch_mask(patch_size: usize, mask_ratio: f64) -> Self {
        Self {
            kind: CorruptionKind::PatchMask,
            patch_size,
            mask_ratio,
            fill_value: 0.0,
            sigma: 0.1,
            clamp: true,
            loss_policy: None,
        }
    }

    pub fn gaussian_noise(sigma: f64) -> Self {
        Self {
            kind: CorruptionKind::GaussianNoise,
            patch_size: 8,
            mask_ratio: 0.5,
            fill_value: 0.0,
            sigma,
            clamp: true,
            loss_policy: None,
        }
    }

    pub fn policy(&self) -> LossPolicy {
        self.loss_policy.unwrap_or(match self.kind {
            CorruptionKind::PatchMask => LossPolicy::MaskedOnly,
            CorruptionKind::GaussianNoise | CorruptionKind::Combined => LossPolicy::Full,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma {} must be non-negative", self.sigma)));
        }
        Ok(())
    }

    /// Checks that `patch_size` tiles an `height x width` image.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        if self.kind != CorruptionKind::GaussianNoise
            && (height % self.patch_size != 0 || width % self.patch_size != 0)
        {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image {height}x{width}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Per-pixel corruption map; `true` marks a corrupted pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MaskMap {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Repeats the map over `channels`, matching a `[C, H, W]` layout.
    pub fn expand(&self, channels: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(channels * self.bits.len());
        for _ in 0..channels {
            out.extend_from_slice(&self.bits);
        }
        out
    }
}

fn image_dims<T: Real>(op: &'static str, image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::invalid(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Number of masked tiles for `tiles` tiles at `ratio`: `round(ratio * tiles)`.
pub fn masked_tile_count(ratio: f64, tiles: usize) -> usize {
    (ratio * tiles as f64).round() as usize
}

/// Masks `round(mask_ratio * tiles)` whole tiles chosen uniformly without
/// replacement, setting them to `fill_value` in every channel.
pub fn mask_patches<T: Real>(
    image: &Tensor<T>,
    spec: &CorruptionSpec,
    rng: &mut SeededRng,
) -> Result<(Tensor<T>, MaskMap)> {
    let (c, h, w) = image_dims("mask_patches", image)?;
    spec.validate()?;
    let p = spec.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(Error::invalid(
            "mask_patches",
            format!("patch size {p} does not divide {h}x{w}"),
        ));
    }
    let (ty, tx) = (h / p, w / p);
    let chosen = rng.sample_indices(ty * tx, masked_tile_count(spec.mask_ratio, ty * tx));
    let mut mask = MaskMap::filled(h, w, false);
    for tile in chosen {
        let (y0, x0) = ((tile / tx) * p, (tile % tx) * p);
        for y in y0..y0 + p {
            mask.bits[y * w + x0..y * w + x0 + p].fill(true);
        }
    }
    let fill = T::from_f64_lossy(spec.fill_value);
    let mut out = image.clone();
    for ch in out.data_mut().chunks_mut(h * w).take(c) {
        for (v, &m) in ch.iter_mut().zip(&mask.bits) {
            if m {
                *v = fill;
            }
        }
    }
    Ok((out, mask))
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every element, optionally clipping to `[0, 1]`.
pub fn add_gaussian_noise<T: Real>(
    image: &Tensor<T>,
    spec: &CorruptionSpec,
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    image_dims("add_gaussian_noise", image)?;
    if !(spec.sigma >= 0.0) {
        return Err(Error::invalid(
            "add_gaussian_noise",
            format!("sigma {} must be non-negative", spec.sigma),
        ));
    }
    if spec.sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    let (lo, hi) = (T::zero(), T::one());
    for v in out.data_mut() {
        let noisy = *v + T::from_f64_lossy(spec.sigma * rng.normal());
        *v = if spec.clamp { noisy.max(lo).min(hi) } else { noisy };
    }
    Ok(out)
}

/// Applies `spec` to one `[C, H, W]` image.
pub fn corrupt<T: Real>(
    image: &Tensor<T>,
    spec: &CorruptionSpec,
    rng: &mut SeededRng,
) -> Result<(Tensor<T>, MaskMap)> {
    let (_, h, w) = image_dims("corrupt", image)?;
    match spec.kind {
        CorruptionKind::PatchMask => mask_patches(image, spec, rng),
        CorruptionKind::GaussianNoise => Ok((add_gaussian_noise(image, spec, rng)?, MaskMap::filled(h, w, true))),
        CorruptionKind::Combined => {
            let noisy = add_gaussian_noise(image, spec, rng)?;
            let (masked, _) = mask_patches(&noisy, spec, rng)?;
            Ok((masked, MaskMap::filled(h, w, true)))
        }
    }
}

/// Per-image masks broadcast over channels, flattened for `[N, C, H, W]`.
pub fn batch_mask(masks: &[MaskMap], channels: usize) -> Vec<bool> {
    masks.iter().flat_map(|m| m.expand(channels)).collect()
}

/// Mean squared error between `prediction` and `target` over the pixel set the
/// policy selects. Works on `[C, H, W]` images.
pub fn reconstruction_loss<T: Real>(
    prediction: &Tensor<T>,
    target: &Tensor<T>,
    mask: &MaskMap,
    policy: LossPolicy,
) -> Result<T> {
    if prediction.shape() != target.shape() {
        return Err(Error::shape("reconstruction_loss", prediction.shape(), target.shape()));
    }
    let (c, h, w) = image_dims("reconstruction_loss", prediction)?;
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::shape("reconstruction_loss", &[h, w], &[mask.height, mask.width]));
    }
    let mut tape = Tape::new();
    let p = tape.constant(prediction.clone());
    let t = tape.constant(target.clone());
    let loss = match policy {
        LossPolicy::Full => tape.mse(p, t, None),
        LossPolicy::MaskedOnly => {
            if mask.count() == 0 {
                return Err(Error::invalid("reconstruction_loss", "mask selects no pixels"));
            }
            tape.mse(p, t, Some(&mask.expand(c)))
        }
    }?;
    tape.value(loss).item()
}

/// Applies the right mask layout for a batch loss on the tape.
pub fn batch_loss_mask(masks: &[MaskMap], channels: usize, policy: LossPolicy) -> Option<Vec<bool>> {
    match policy {
        LossPolicy::Full => None,
        LossPolicy::MaskedOnly => Some(batch_mask(masks, channels)),
    }
}

/// Shape check shared by batch consumers.
pub fn check_batch<T: Real>(batch: &Tensor<T>) -> Result<[usize; 4]> {
    dims4("corruption", batch.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut r = SeededRng::new(seed);
        Tensor::from_fn(vec![c, h, w], |_| r.uniform() as f32)
    }

    #[test]
    fn zero_and_full_ratio() {
        let img = image(3, 16, 16, 1);
        let mut rng = SeededRng::new(5);
        let (out, mask) = mask_patches(&img, &CorruptionSpec::patch_mask(4, 0.0), &mut rng).unwrap();
        assert_eq!(out, img);
        assert_eq!(mask.count(), 0);
        let (out, mask) = mask_patches(&img, &CorruptionSpec::patch_mask(4, 1.0), &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(mask.count(), 256);
    }

    #[test]
    fn quarter_of_tiles_masked() {
        let img = image(3, 64, 64, 2);
        let mut rng = SeededRng::new(7);
        let (_, mask) = mask_patches(&img, &CorruptionSpec::patch_mask(8, 0.25), &mut rng).unwrap();
        assert_eq!(mask.count(), 1024);
        // union of whole tiles
        for ty in 0..8 {
            for tx in 0..8 {
                let first = mask.get(ty * 8, tx * 8);
                for y in 0..8 {
                    for x in 0..8 {
                        assert_eq!(mask.get(ty * 8 + y, tx * 8 + x), first);
                    }
                }
            }
        }
    }

    #[test]
    fn non_divisible_patch_rejected() {
        let img = image(1, 10, 10, 3);
        let mut rng = SeededRng::new(1);
        assert!(mask_patches(&img, &CorruptionSpec::patch_mask(4, 0.5), &mut rng).is_err());
    }

    #[test]
    fn noise_identity_and_clamp() {
        let img = image(3, 8, 8, 4);
        let mut rng = SeededRng::new(1);
        let out = add_gaussian_noise(&img, &CorruptionSpec::gaussian_noise(0.0), &mut rng).unwrap();
        assert_eq!(out, img);
        let ones = Tensor::<f32>::ones(vec![3, 32, 32]);
        let out = add_gaussian_noise(&ones, &CorruptionSpec::gaussian_noise(0.1), &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v <= 1.0));
        let mut bad = CorruptionSpec::gaussian_noise(0.1);
        bad.sigma = -1.0;
        assert!(add_gaussian_noise(&ones, &bad, &mut rng).is_err());
    }

    #[test]
    fn noise_statistics() {
        let img = Tensor::<f64>::full(vec![3, 256, 256], 0.5);
        let mut spec = CorruptionSpec::gaussian_noise(0.1);
        spec.clamp = false;
        let mut rng = SeededRng::new(11);
        let out = add_gaussian_noise(&img, &spec, &mut rng).unwrap();
        let d: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.003, "mean {mean}");
        assert!((std - 0.1).abs() < 0.005, "std {std}");
    }

    #[test]
    fn reconstruction_loss_examples() {
        let t = Tensor::<f64>::zeros(vec![1, 2, 2]);
        let all = MaskMap::filled(2, 2, true);
        assert_eq!(reconstruction_loss(&t, &t, &all, LossPolicy::Full).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&t, &t, &all, LossPolicy::MaskedOnly).unwrap(), 0.0);

        let off = Tensor::<f64>::full(vec![1, 2, 2], 0.1);
        let l = reconstruction_loss(&off, &t, &all, LossPolicy::Full).unwrap();
        assert!((l - 0.01).abs() < 1e-12);

        let one = Tensor::<f64>::new(vec![1, 2, 2], vec![0.2, 0.0, 0.0, 0.0]).unwrap();
        let mut mask = MaskMap::filled(2, 2, false);
        mask.bits[0] = true;
        let masked = reconstruction_loss(&one, &t, &mask, LossPolicy::MaskedOnly).unwrap();
        let full = reconstruction_loss(&one, &t, &mask, LossPolicy::Full).unwrap();
        assert!((masked - 0.04).abs() < 1e-12);
        assert!((full - 0.01).abs() < 1e-12);

        let empty = MaskMap::filled(2, 2, false);
        assert!(reconstruction_loss(&one, &t, &empty, LossPolicy::MaskedOnly).is_err());
    }

    #[test]
    fn default_policies() {
        assert_eq!(CorruptionSpec::patch_mask(8, 0.5).policy(), LossPolicy::MaskedOnly);
        assert_eq!(CorruptionSpec::gaussian_noise(0.1).policy(), LossPolicy::Full);
    }
}

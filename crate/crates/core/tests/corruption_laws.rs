use proptest::prelude::*;
use sslf_core::corruption::{corrupt, mask_patches, add_gaussian_noise, reconstruction_loss, masked_tile_count};
use sslf_core::{CorruptionKind, CorruptionSpec, LossPolicy, SeededRng, Tensor};

fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut r = SeededRng::new(seed);
    Tensor::from_fn(vec![c, h, w], |_| r.uniform() as f32)
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize)> {
    // (patch, tiles_y, tiles_x)
    (prop::sample::select(vec![1usize, 2, 4, 8]), 1usize..6, 1usize..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn masked_tile_count_is_exact((p, ty, tx) in geometry(), ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let img = image(seed, 3, p * ty, p * tx);
        let spec = CorruptionSpec::patch_mask(p, ratio);
        let (_, mask) = mask_patches(&img, &spec, &mut SeededRng::new(seed ^ 1)).unwrap();
        let expected = (ratio * (ty * tx) as f64).round() as usize;
        prop_assert_eq!(masked_tile_count(ratio, ty * tx), expected);
        prop_assert_eq!(mask.count(), expected * p * p);
        // every tile is either fully masked or untouched
        for y0 in (0..p * ty).step_by(p) {
            for x0 in (0..p * tx).step_by(p) {
                let first = mask.get(y0, x0);
                for y in y0..y0 + p {
                    for x in x0..x0 + p {
                        prop_assert_eq!(mask.get(y, x), first);
                    }
                }
            }
        }
    }

    #[test]
    fn unmasked_pixels_are_bit_identical((p, ty, tx) in geometry(), ratio in 0.0f64..=1.0, seed in any::<u64>(), fill in -1.0f64..2.0) {
        let (h, w) = (p * ty, p * tx);
        let img = image(seed, 3, h, w);
        let spec = CorruptionSpec { fill_value: fill, ..CorruptionSpec::patch_mask(p, ratio) };
        let (out, mask) = mask_patches(&img, &spec, &mut SeededRng::new(seed)).unwrap();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let i = (c * h + y) * w + x;
                    if mask.get(y, x) {
                        prop_assert_eq!(out.data()[i], fill as f32);
                    } else {
                        prop_assert_eq!(out.data()[i].to_bits(), img.data()[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn zero_sigma_is_identity(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, clamp in any::<bool>()) {
        let img = image(seed, 3, h, w);
        let spec = CorruptionSpec { clamp, ..CorruptionSpec::gaussian_noise(0.0) };
        let out = add_gaussian_noise(&img, &spec, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(out, img);
    }

    #[test]
    fn clamp_keeps_unit_range(seed in any::<u64>(), sigma in 0.0f64..3.0, h in 1usize..10) {
        let img = image(seed, 3, h, h);
        let spec = CorruptionSpec { clamp: true, ..CorruptionSpec::gaussian_noise(sigma) };
        let out = add_gaussian_noise(&img, &spec, &mut SeededRng::new(seed)).unwrap();
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn corruption_is_deterministic(seed in any::<u64>(), kind in prop::sample::select(vec![CorruptionKind::PatchMask, CorruptionKind::GaussianNoise, CorruptionKind::Combined])) {
        let img = image(seed, 3, 8, 8);
        let spec = CorruptionSpec { kind, ..CorruptionSpec::patch_mask(4, 0.5) };
        let a = corrupt(&img, &spec, &mut SeededRng::new(seed)).unwrap();
        let b = corrupt(&img, &spec, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }
}

#[test]
fn noise_statistics_match_sigma() {
    let img = Tensor::<f64>::full(vec![3, 64, 64], 0.5);
    let spec = CorruptionSpec { clamp: false, ..CorruptionSpec::gaussian_noise(0.1) };
    let out = add_gaussian_noise(&img, &spec, &mut SeededRng::new(9)).unwrap();
    let d: Vec<f64> = out.data().iter().map(|v| v - 0.5).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    // standard errors for n = 12288: 9e-4 on the mean, 6.4e-4 on sd
    assert!(mean.abs() < 4e-3, "{mean}");
    assert!((sd - 0.1).abs() < 3e-3, "{sd}");
}

#[test]
fn masked_loss_ignores_visible_pixels() {
    let clean = image(3, 3, 8, 8);
    let spec = CorruptionSpec::patch_mask(4, 0.5);
    let (masked, mask) = mask_patches(&clean, &spec, &mut SeededRng::new(4)).unwrap();
    // a prediction that is wrong only on visible pixels scores zero masked loss
    let mut pred = clean.clone();
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                if !mask.get(y, x) {
                    pred.data_mut()[(c * 8 + y) * 8 + x] += 1.0;
                }
            }
        }
    }
    assert_eq!(reconstruction_loss(&pred, &clean, &mask, LossPolicy::MaskedOnly).unwrap(), 0.0);
    assert!(reconstruction_loss(&pred, &clean, &mask, LossPolicy::Full).unwrap() > 0.0);
    assert!(reconstruction_loss(&masked, &clean, &mask, LossPolicy::MaskedOnly).unwrap() > 0.0);
}

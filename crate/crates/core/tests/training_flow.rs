use sslf_core::gradsuite::tiny_configs;
use sslf_core::training::{
    classifier_checkpoint, model_from_checkpoint, pretrain, train_classifier, unet_from_checkpoint, Flow,
};
use sslf_core::{Checkpoint, CorruptionSpec, Error, FusedModel, FusionConfig, ImageSet, SeededRng, Tensor, TrainConfig, UNet};

fn textured_set(n: usize, size: usize, seed: u64) -> ImageSet {
    let mut r = SeededRng::new(seed);
    let images = (0..n)
        .map(|i| {
            let (fx, phase) = (1.0 + (i % 3) as f64, r.uniform());
            Tensor::from_fn(vec![3, size, size], |k| {
                let x = (k % size) as f64 / size as f64;
                (0.5 + 0.4 * (std::f64::consts::TAU * (fx * x + phase)).sin()) as f32
            })
        })
        .collect();
    ImageSet { images, labels: (0..n).map(|i| i % 3).collect() }
}

#[test]
fn every_single_byte_flip_is_rejected() {
    let (u, b) = tiny_configs();
    let cfg = FusionConfig { head_dims: vec![4], ..FusionConfig::default() };
    let model = FusedModel::<f32>::build(&cfg, &u, &b, 1).unwrap();
    let bytes = classifier_checkpoint(&model, serde_json::json!({"note": "x"})).to_bytes();
    let back = model_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, model);
    for i in (0..bytes.len()).step_by(7) {
        let mut b = bytes.clone();
        b[i] ^= 0x20;
        let err = Checkpoint::from_bytes(&b).unwrap_err();
        assert!(
            matches!(err, Error::Checksum { .. } | Error::BadMagic { .. } | Error::UnsupportedVersion { .. } | Error::Truncated { .. }),
            "byte {i}: {err}"
        );
    }
}

#[test]
fn denoising_pretraining_improves_and_is_deterministic() {
    let train = textured_set(8, 8, 1);
    let val = textured_set(4, 8, 2);
    let (ucfg, _) = tiny_configs();
    let spec = CorruptionSpec::gaussian_noise(0.1);
    let cfg = TrainConfig { epochs: 12, batch_size: 4, learning_rate: 3e-3, ..TrainConfig::default() };
    let run = || {
        pretrain(UNet::<f32>::build(&ucfg, 4).unwrap(), &train, &val, &spec, &cfg, &mut |_, _, _| Flow::Continue).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.report.val_curve.len(), 12);
    assert!(a.report.val_mse < a.report.val_curve[0], "{:?}", a.report.val_curve);
    assert!(a.report.train_curve.last() < a.report.train_curve.first());
    let restored = unet_from_checkpoint(&a.checkpoint).unwrap();
    assert_eq!(restored.params, a.unet.params);
}

#[test]
fn early_stop_and_divergence() {
    let data = textured_set(6, 8, 3);
    let (u, b) = tiny_configs();
    let fcfg = FusionConfig { head_dims: vec![4], ..FusionConfig::default() };
    let model = FusedModel::<f32>::build(&fcfg, &u, &b, 1).unwrap();
    let cfg = TrainConfig { epochs: 10, batch_size: 3, ..TrainConfig::default() };
    let out = train_classifier(model, &data, &data, &cfg, &mut |m| {
        if m.epoch == 2 { Flow::Stop } else { Flow::Continue }
    })
    .unwrap();
    assert_eq!(out.history.len(), 2);

    let mut poisoned = data.clone();
    poisoned.images[0].data_mut()[5] = f32::NAN;
    let unet = UNet::<f32>::build(&u, 2).unwrap();
    let spec = CorruptionSpec::gaussian_noise(0.1);
    let err = pretrain(unet, &poisoned, &data, &spec, &cfg, &mut |_, _, _| Flow::Continue).err().unwrap();
    assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
}

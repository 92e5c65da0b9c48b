use sslf_core::backbone::StageSpec;
use sslf_core::fusion::fuse_attention;
use sslf_core::gradsuite::tiny_configs;
use sslf_core::{
    Backbone, BackboneConfig, Ctx, FusedModel, FusionConfig, ParamStore, SeededRng, Tensor, UNet, UNetConfig,
    VariantKind,
};

fn batch(seed: u64, n: usize, size: usize) -> Tensor<f32> {
    let mut r = SeededRng::new(seed);
    Tensor::from_fn(vec![n, 3, size, size], |_| r.uniform() as f32)
}

/// Trainable names whose gradient is entirely zero after one backward pass.
fn dead_parameters(store: &ParamStore<f32>) -> Vec<String> {
    store
        .iter()
        .filter(|(_, p)| p.role == sslf_core::nn::Role::Trainable)
        .filter(|(_, p)| p.value.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)))
        .map(|(n, _)| n.to_string())
        .collect()
}

#[test]
fn unet_gradients_reach_every_parameter() {
    let cfg = UNetConfig { depth: 2, base_channels: 8, ..UNetConfig::default() };
    let mut unet = UNet::<f32>::build(&cfg, 1).unwrap();
    let mut cx = Ctx::train(SeededRng::new(2));
    let x = cx.tape.constant(batch(3, 2, 16));
    let target = cx.tape.constant(batch(4, 2, 16));
    let y = unet.forward(&mut cx, x).unwrap();
    let loss = cx.tape.mse(y, target, None).unwrap();
    cx.tape.backward(loss).unwrap();
    unet.params.collect_grads(&cx.tape);
    assert_eq!(dead_parameters(&unet.params), Vec::<String>::new());
}

#[test]
fn backbone_gradients_reach_every_parameter() {
    let cfg = BackboneConfig::default();
    let mut b = Backbone::<f32>::build(&cfg, 1).unwrap();
    let mut cx = Ctx::train(SeededRng::new(2));
    let x = cx.tape.constant(batch(5, 2, 32));
    let f = b.forward(&mut cx, x).unwrap();
    assert_eq!(cx.tape.shape(f), &[2, cfg.feature_dim]);
    let sq = cx.tape.square(f).unwrap();
    let loss = cx.tape.mean(sq).unwrap();
    cx.tape.backward(loss).unwrap();
    b.params.collect_grads(&cx.tape);
    assert_eq!(dead_parameters(&b.params), Vec::<String>::new());
}

#[test]
fn nano_backbone_size() {
    let b = Backbone::<f32>::build(&BackboneConfig::default(), 0).unwrap();
    let n = b.parameter_count();
    assert!((150_000..250_000).contains(&n), "{n}");
    // downsampling: stem stride 2 then stage strides
    assert_eq!(BackboneConfig::default().cumulative_stride(), 16);
}

#[test]
fn skip_connections_matter() {
    let cfg = UNetConfig { depth: 2, base_channels: 4, ..UNetConfig::default() };
    let mut unet = UNet::<f32>::build(&cfg, 7).unwrap();
    let x = batch(1, 1, 8);
    let mut cx = Ctx::eval();
    let xv = cx.tape.constant(x.clone());
    let a = unet.forward(&mut cx, xv).unwrap();
    let b = unet.forward_without_skips(&mut cx, xv).unwrap();
    assert_ne!(cx.tape.value(a), cx.tape.value(b));
    assert_eq!(cx.tape.shape(a), &[1, 3, 8, 8]);
}

#[test]
fn every_variant_produces_ten_logits() {
    let (u, b) = tiny_configs();
    for v in VariantKind::ALL {
        let cfg = FusionConfig { variant: v, head_dims: vec![8], common_dim: 8, ..FusionConfig::default() };
        let mut m = FusedModel::<f32>::build(&cfg, &u, &b, 3).unwrap();
        let logits = m.logits(&batch(2, 3, 8)).unwrap();
        assert_eq!(logits.shape(), &[3, 10], "{v}");
        assert!(logits.all_finite());
    }
}

#[test]
fn attention_weights_are_a_distribution() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = SeededRng::new(1);
    sslf_core::fusion::init_attention_fusion(&mut store, &mut rng, 5, 7, 4);
    let mut cx = Ctx::<f64>::eval();
    let u = cx.tape.constant(Tensor::from_fn(vec![3, 5], |i| (i as f64).sin()));
    let e = cx.tape.constant(Tensor::from_fn(vec![3, 7], |i| (i as f64).cos()));
    store.bind(&mut cx.tape);
    let (out, alpha) = fuse_attention(&mut cx.tape, &store, u, e).unwrap();
    assert_eq!(cx.tape.shape(out), &[3, 4]);
    for row in cx.tape.value(alpha).data().chunks(2) {
        assert!(row.iter().all(|&a| a > 0.0));
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn frozen_unet_is_untouched_by_training_step() {
    let (u, b) = tiny_configs();
    let cfg = FusionConfig { head_dims: vec![8], ..FusionConfig::default() };
    let mut m = FusedModel::<f32>::build(&cfg, &u, &b, 3).unwrap();
    assert!(m.unet_frozen());
    let before = m.unet.clone().unwrap().params;
    let mut adam = sslf_core::training::Adam::new(Default::default());
    let mut cx = Ctx::train(SeededRng::new(1));
    let x = cx.tape.constant(batch(9, 2, 8));
    let logits = m.forward(&mut cx, x).unwrap();
    let loss = cx.tape.softmax_cross_entropy(logits, &[0, 1], None).unwrap();
    cx.tape.backward(loss).unwrap();
    let head_before = m.head.clone();
    let mut stores = m.stores_mut();
    for (_, s) in stores.iter_mut() {
        s.collect_grads(&cx.tape);
    }
    adam.step(&mut stores).unwrap();
    assert_eq!(m.unet.as_ref().unwrap().params, before);
    assert_ne!(m.head, head_before);
}

#[test]
fn stage_scaling_rules() {
    use sslf_core::backbone::{scale_channels, scale_repeats};
    assert_eq!(scale_channels(16, 1.0), 16);
    assert_eq!(scale_channels(24, 1.4), 34);
    assert_eq!(scale_channels(4, 0.5), 8);
    assert_eq!(scale_repeats(2, 1.0), 2);
    assert_eq!(scale_repeats(2, 1.1), 3);
    let wide = BackboneConfig { width_mult: 2.0, ..BackboneConfig::default() };
    let plans = wide.block_plans();
    assert_eq!(plans.last().unwrap().out_channels, 160);
    assert_eq!(StageSpec::new(1, 8, 1, 1, 3), StageSpec::new(1, 8, 1, 1, 3));
}

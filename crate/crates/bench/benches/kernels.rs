use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sslf_bench::random_tensor;
use sslf_core::metrics::{confusion, report};
use sslf_core::tensor::ops::{conv2d, Padding};
use sslf_core::{SeededRng, Tape, UNet, UNetConfig};

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[16, 16, 32, 32], 1);
    let k = random_tensor(&[32, 16, 3, 3], 2);
    c.bench_function("conv2d_forward_16x16x32x32_k3", |b| {
        b.iter(|| conv2d(black_box(&x), black_box(&k), None, 1, Padding::Same).unwrap())
    });
    c.bench_function("conv2d_forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.leaf(k.clone().with_requires_grad(true));
            let y = tape.conv2d(xv, kv, None, 1, Padding::Same).unwrap();
            let loss = tape.mean(y).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.grad(kv).is_some())
        })
    });
}

fn unet(c: &mut Criterion) {
    let mut net = UNet::<f32>::build(&UNetConfig::default(), 0).unwrap();
    let batch = random_tensor(&[8, 3, 64, 64], 3);
    c.bench_function("unet_reconstruct_8x64x64", |b| b.iter(|| net.reconstruct(black_box(&batch)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let mut rng = SeededRng::new(4);
    let labels: Vec<usize> = (0..16_000).map(|_| rng.below(10) as usize).collect();
    let preds: Vec<usize> = labels.iter().map(|&l| if rng.uniform() < 0.9 { l } else { rng.below(10) as usize }).collect();
    c.bench_function("confusion_and_report_16k", |b| {
        b.iter(|| report(&confusion(black_box(&labels), black_box(&preds)).unwrap()).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, unet, metrics
}
criterion_main!(benches);

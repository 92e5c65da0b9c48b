use proptest::prelude::*;
use sslf_core::tensor::ops::{self, Padding};
use sslf_core::{SeededRng, Tape, Tensor};

fn var(t: &mut Tape<f64>, x: Tensor<f64>) -> sslf_core::Var {
    t.leaf(x.with_requires_grad(true))
}

fn rand(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut r = SeededRng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.uniform_range(-1.0, 1.0))
}

#[test]
fn square_sum_gradient() {
    let mut t = Tape::new();
    let x = var(&mut t, Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
    let unused = var(&mut t, Tensor::<f64>::zeros(vec![2]));
    let y = t.square(x).unwrap();
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    assert_eq!(t.grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn max_pool_tie_goes_to_first() {
    let mut t = Tape::new();
    let x = var(&mut t, Tensor::<f64>::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 0.0, 0.0]).unwrap());
    let y = t.max_pool2d(x, 2, 2).unwrap();
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_backward_sums_blocks() {
    let mut t = Tape::new();
    let x = var(&mut t, rand(1, &[1, 2, 3, 3]));
    let y = t.upsample2d(x, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 2, 6, 6]);
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|&g| g == 4.0));
}

#[test]
fn backward_twice_accumulates() {
    let build = |t: &mut Tape<f64>| {
        let x = var(t, rand(2, &[2, 3]));
        let w = var(t, rand(3, &[3, 4]));
        let y = t.matmul(x, w).unwrap();
        let y = t.silu(y).unwrap();
        let l = t.mean(y).unwrap();
        (x, w, l)
    };
    let mut t = Tape::new();
    let (x, w, l) = build(&mut t);
    t.backward(l).unwrap();
    let once: Vec<f64> = t.grad(w).unwrap().to_vec();
    let gx: Vec<f64> = t.grad(x).unwrap().to_vec();
    t.backward(l).unwrap();
    for (a, b) in t.grad(w).unwrap().iter().zip(&once) {
        assert_eq!(*a, 2.0 * b);
    }
    for (a, b) in t.grad(x).unwrap().iter().zip(&gx) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn composite_network_gradients() {
    use sslf_core::tensor::grad_check;
    let params = vec![
        ("conv".to_string(), rand(4, &[2, 1, 3, 3])),
        ("fc".to_string(), rand(5, &[8, 3])),
    ];
    let input = rand(6, &[1, 1, 8, 8]);
    let r = grad_check(
        |t, p| {
            let x = t.constant(input.clone());
            let h = t.conv2d(x, p[0], None, 1, Padding::Same)?;
            let h = t.silu(h)?;
            let h = t.pool2d(h, ops::PoolKind::Avg, 4, 4)?;
            let h = t.reshape(h, &[1, 8])?;
            let logits = t.matmul(h, p[1])?;
            t.softmax_cross_entropy(logits, &[2], None)
        },
        &params,
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = Tensor::from_fn(vec![rows, cols], {
            let mut r = SeededRng::new(seed);
            move |_| scale * r.uniform_range(-1.0, 1.0)
        });
        let y = ops::softmax_last(&x).unwrap();
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_padding_preserves_spatial_dims(k in prop::sample::select(vec![1usize, 3, 5, 7]), h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let x = rand(seed, &[1, 2, h, w]);
        let kernel = rand(seed ^ 7, &[3, 2, k, k]);
        let y = ops::conv2d(&x, &kernel, None, 1, Padding::Same).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, h, w]);
        let dk = rand(seed ^ 9, &[2, 1, k, k]);
        let y = ops::depthwise_conv2d(&x, &dk, 1, Padding::Same).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, h, w]);
    }

    #[test]
    fn forward_ops_are_pure(seed in any::<u64>()) {
        let x = rand(seed, &[2, 3, 6, 6]);
        let k = rand(seed ^ 3, &[4, 3, 3, 3]);
        let a = ops::conv2d(&x, &k, None, 2, Padding::Same).unwrap();
        let b = ops::conv2d(&x, &k, None, 2, Padding::Same).unwrap();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let s1 = ops::softmax_last(&x).unwrap();
        let s2 = ops::softmax_last(&x).unwrap();
        prop_assert_eq!(s1, s2);
    }
}

#[test]
fn even_kernel_same_padding_rejected() {
    let x = rand(1, &[1, 1, 4, 4]);
    let k = rand(2, &[1, 1, 2, 2]);
    assert!(ops::conv2d(&x, &k, None, 1, Padding::Same).is_err());
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpose_tensor::conv::{conv2d_forward, conv2d_reference};
use rpose_tensor::gradcheck::finite_difference_check;
use rpose_tensor::{BatchNormStats, Graph, Tensor, TensorError};

const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Uniform in [-1, 1] but at least 1e-3 away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(1e-3..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[test]
fn conv_scaled_identity_kernel() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
    let w = g.leaf(Tensor::full(vec![1, 1, 1, 1], 2.0), false);
    let b = g.leaf(Tensor::zeros(vec![1]), false);
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_single_window_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let w = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
    let b = g.leaf(Tensor::zeros(vec![1]), false);
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn conv_output_extent_formula() {
    for (h, k, s, p) in [(8, 3, 1, 1), (9, 3, 2, 0), (7, 5, 2, 2), (10, 1, 3, 0)] {
        let x = Tensor::<f64>::zeros(vec![1, 2, h, h]);
        let w = Tensor::<f64>::zeros(vec![3, 2, k, k]);
        let (y, _, _) = conv2d_forward(&x, &w, None, s, p, false).unwrap();
        let e = (h + 2 * p - k) / s + 1;
        assert_eq!(y.shape(), &[1, 3, e, e]);
    }
}

#[test]
fn conv_shape_errors_name_both_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]), false);
    let w = g.leaf(Tensor::zeros(vec![1, 3, 3, 3]), false);
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");

    let w = g.leaf(Tensor::zeros(vec![1, 2, 5, 5]), false);
    assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(TensorError::Dimension { .. })));
}

#[test]
fn conv_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 3, 8, 8]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let b = random(&mut rng, &[4]);
    let err = finite_difference_check(
        |g, w| {
            let xv = g.leaf(x.clone(), false);
            let bv = g.leaf(b.clone(), false);
            let y = g.conv2d(xv, w, Some(bv), 1, 1)?;
            g.sum(y)
        },
        &w,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_input_and_bias_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[2, 2, 7, 6]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    let r = random(&mut rng, &[2, 3, 4, 3]);
    // stride 2 with padding exercises the col2im boundary handling
    let weighted = |g: &mut Graph<f64>, y| {
        let rv = g.leaf(r.clone(), false);
        let z = g.mul(y, rv)?;
        g.sum(z)
    };
    let err = finite_difference_check(
        |g, xv| {
            let wv = g.leaf(w.clone(), false);
            let bv = g.leaf(b.clone(), false);
            let y = g.conv2d(xv, wv, Some(bv), 2, 1)?;
            weighted(g, y)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "input: {err}");
    let err = finite_difference_check(
        |g, bv| {
            let xv = g.leaf(x.clone(), false);
            let wv = g.leaf(w.clone(), false);
            let y = g.conv2d(xv, wv, Some(bv), 2, 1)?;
            weighted(g, y)
        },
        &b,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "bias: {err}");
}

#[test]
fn pointwise_conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, &[2, 4, 5, 5]);
    let w = random(&mut rng, &[3, 4, 1, 1]);
    let r = random(&mut rng, &[2, 3, 5, 5]);
    for wrt_input in [true, false] {
        let err = finite_difference_check(
            |g, v| {
                let (xv, wv) = if wrt_input {
                    (v, g.leaf(w.clone(), false))
                } else {
                    (g.leaf(x.clone(), false), v)
                };
                let y = g.conv2d(xv, wv, None, 1, 0)?;
                let rv = g.leaf(r.clone(), false);
                let z = g.mul(y, rv)?;
                g.sum(z)
            },
            if wrt_input { &x } else { &w },
            H,
        )
        .unwrap();
        assert!(err < 1e-4, "wrt_input={wrt_input}: {err}");
    }
}

#[test]
fn maxpool_single_window() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let y = g.max_pool2d(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(vec![1, 1, 4, 4], 3.0), true);
    let y = g.max_pool2d(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 3.0));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let dx = g.grad(x).unwrap().data();
    for r in 0..4 {
        for c in 0..4 {
            let expected = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(dx[r * 4 + c], expected, "({r},{c})");
        }
    }
}

#[test]
fn maxpool_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 2, 8, 8]);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), false);
    let y = g.max_pool2d(xv).unwrap();
    let yd = g.value(y).data();
    for c in 0..2 {
        for oy in 0..4 {
            for ox in 0..4 {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(x.data()[c * 64 + (2 * oy + dy) * 8 + 2 * ox + dx]);
                    }
                }
                assert_eq!(yd[c * 16 + oy * 4 + ox], best);
            }
        }
    }
}

#[test]
fn maxpool_rejects_odd_extent() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(vec![1, 1, 3, 4]), false);
    assert!(matches!(g.max_pool2d(x), Err(TensorError::Dimension { .. })));
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 2, 6, 6]);
    let r = random(&mut rng, &[2, 2, 3, 3]);
    let err = finite_difference_check(
        |g, xv| {
            let y = g.max_pool2d(xv)?;
            let rv = g.leaf(r.clone(), false);
            let z = g.mul(y, rv)?;
            g.sum(z)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn relu_forward_and_dead_input() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    // gradient at exactly zero is zero
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(vec![4], -0.5), true);
    let y = g.relu(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = away_from_zero(&mut rng, &[2, 3, 4, 4]);
    let r = random(&mut rng, &[2, 3, 4, 4]);
    let err = finite_difference_check(
        |g, xv| {
            let y = g.relu(xv)?;
            let rv = g.leaf(r.clone(), false);
            let z = g.mul(y, rv)?;
            g.sum(z)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn channel_moments(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
    let (n, c, h, w) = t.dims4().unwrap();
    let plane = h * w;
    let vals: Vec<f64> = (0..n)
        .flat_map(|s| t.data()[(s * c + ch) * plane..][..plane].to_vec())
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var.sqrt())
}

#[test]
fn batchnorm_train_output_has_affine_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(vec![4, 3, 5, 5], |_| rng.random_range(-3.0..7.0));
    let gamma = Tensor::new(vec![3], vec![1.5, -0.5, 2.0]).unwrap();
    let beta = Tensor::new(vec![3], vec![0.25, -1.0, 3.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let (xv, gv, bv) = (g.leaf(x, false), g.leaf(gamma.clone(), false), g.leaf(beta.clone(), false));
    let mut stats = BatchNormStats::new(3);
    let y = g.batch_norm2d(xv, gv, bv, true, &mut stats).unwrap();
    for c in 0..3 {
        let (mean, std) = channel_moments(g.value(y), c);
        assert!((mean - beta.data()[c]).abs() < 1e-5);
        // eps = 1e-5 shrinks the std by a relative ~1e-6 for unit-scale inputs
        assert!((std - gamma.data()[c].abs()).abs() < 1e-5, "{std}");
    }
}

#[test]
fn batchnorm_identity_on_standardized_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let raw = random(&mut rng, &[2, 2, 6, 6]);
    let mut x = raw.clone();
    for c in 0..2 {
        let (m, s) = channel_moments(&raw, c);
        for n in 0..2 {
            for v in &mut x.data_mut()[(n * 2 + c) * 36..][..36] {
                *v = (*v - m) / s;
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), false);
    let gv = g.leaf(Tensor::full(vec![2], 1.0), false);
    let bv = g.leaf(Tensor::zeros(vec![2]), false);
    let (y, _) = g.batch_norm2d_train(xv, gv, bv, 1e-5).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_degenerate_batch_is_rejected() {
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(Tensor::zeros(vec![1, 2, 1, 1]), false);
    let gv = g.leaf(Tensor::full(vec![2], 1.0), false);
    let bv = g.leaf(Tensor::zeros(vec![2]), false);
    assert!(matches!(
        g.batch_norm2d_train(xv, gv, bv, 1e-5),
        Err(TensorError::DegenerateStatistics { count: 1, .. })
    ));
}

#[test]
fn batchnorm_running_stats_and_eval_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(vec![3, 1, 4, 4], |_| rng.random_range(2.0..4.0));
    let (mean, std) = channel_moments(&x, 0);
    let m = 48.0;
    let mut stats = BatchNormStats::<f64>::new(1);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let gv = g.leaf(Tensor::full(vec![1], 1.0), false);
    let bv = g.leaf(Tensor::zeros(vec![1]), false);
    g.batch_norm2d(xv, gv, bv, true, &mut stats).unwrap();
    assert!((stats.running_mean[0] - 0.1 * mean).abs() < 1e-12);
    let unbiased = std * std * m / (m - 1.0);
    assert!((stats.running_var[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);

    let y = g.batch_norm2d(xv, gv, bv, false, &mut stats.clone()).unwrap();
    let inv = 1.0 / (stats.running_var[0] + 1e-5).sqrt();
    for (o, i) in g.value(y).data().iter().zip(x.data()) {
        assert!((o - (i - stats.running_mean[0]) * inv).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[3, 2, 4, 4]);
    let gamma = random(&mut rng, &[2]);
    let beta = random(&mut rng, &[2]);
    let r = random(&mut rng, &[3, 2, 4, 4]);
    let stats = BatchNormStats {
        running_mean: vec![0.1, -0.2],
        running_var: vec![0.8, 1.3],
        momentum: 0.1,
        eps: 1e-5,
    };
    for train in [true, false] {
        for which in 0..3 {
            let err = finite_difference_check(
                |g, v| {
                    let xv = if which == 0 { v } else { g.leaf(x.clone(), false) };
                    let gv = if which == 1 { v } else { g.leaf(gamma.clone(), false) };
                    let bv = if which == 2 { v } else { g.leaf(beta.clone(), false) };
                    let y = g.batch_norm2d(xv, gv, bv, train, &mut stats.clone())?;
                    let rv = g.leaf(r.clone(), false);
                    let z = g.mul(y, rv)?;
                    g.sum(z)
                },
                [&x, &gamma, &beta][which],
                H,
            )
            .unwrap();
            assert!(err < 1e-4, "train={train} operand={which}: {err}");
        }
    }
}

#[test]
fn concat_shapes_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&mut rng, &[1, 2, 4, 4]);
    let mut g = Graph::<f64>::new();
    let av = g.leaf(a.clone(), false);
    let zv = g.leaf(Tensor::zeros(vec![1, 3, 4, 4]), false);
    let c = g.concat_channels(av, zv).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 5, 4, 4]);
    let back = g.slice_channels(c, 0, 2).unwrap();
    assert_eq!(g.value(back), &a);
}

#[test]
fn concat_rejects_spatial_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(vec![1, 2, 4, 4]), false);
    let b = g.leaf(Tensor::zeros(vec![1, 2, 4, 5]), false);
    assert!(matches!(g.concat_channels(a, b), Err(TensorError::Dimension { .. })));
}

#[test]
fn concat_backward_splits_ones() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(vec![2, 2, 3, 3], 0.5), true);
    let b = g.leaf(Tensor::full(vec![2, 1, 3, 3], -0.5), true);
    let c = g.concat_channels(a, b).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn concat_and_slice_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = random(&mut rng, &[2, 2, 3, 3]);
    let b = random(&mut rng, &[2, 3, 3, 3]);
    let r = random(&mut rng, &[2, 3, 3, 3]);
    let err = finite_difference_check(
        |g, av| {
            let bv = g.leaf(b.clone(), false);
            let c = g.concat_channels(av, bv)?;
            let s = g.slice_channels(c, 1, 3)?;
            let rv = g.leaf(r.clone(), false);
            let z = g.mul(s, rv)?;
            g.sum(z)
        },
        &a,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// A tensor read by two consumers gets both contributions: d/dx Σ(x·x + x) = 2x + 1.
#[test]
fn shared_operand_accumulates_gradients() {
    let x = Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 0.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(xv, xv).unwrap();
    let y = g.add(sq, xv).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    for (d, v) in g.grad(xv).unwrap().data().iter().zip(x.data()) {
        assert_eq!(*d, 2.0 * v + 1.0);
    }
}

#[test]
fn backward_needs_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(vec![2]), true);
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn non_finite_forward_is_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::full(vec![2], f64::MAX), false);
    assert!(matches!(g.add(a, a), Err(TensorError::NonFinite { .. })));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[2, 3, 9, 9]).cast::<f32>();
    let w = random(&mut rng, &[4, 3, 5, 5]).cast::<f32>();
    let (a, _, _) = conv2d_forward(&x, &w, None, 1, 2, true).unwrap();
    let (b, _, _) = conv2d_forward(&x, &w, None, 1, 2, false).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gemm_conv_matches_reference(
        n in 1usize..=2, c in 1usize..=4, o in 1usize..=4,
        h in 3usize..=9, w in 3usize..=9,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[n, c, h, w]);
        let wt = random(&mut rng, &[o, c, k, k]);
        let b = random(&mut rng, &[o]);
        let (fast, _, _) = conv2d_forward(&x, &wt, Some(&b), stride, pad, false).unwrap();
        let slow = conv2d_reference(&x, &wt, Some(&b), stride, pad).unwrap();
        prop_assert_eq!(fast.shape(), slow.shape());
        for (a, r) in fast.data().iter().zip(slow.data()) {
            prop_assert!((a - r).abs() < 1e-6);
        }
        // single precision against the same reference, relative tolerance
        let (fast32, _, _) = conv2d_forward(&x.cast::<f32>(), &wt.cast::<f32>(), Some(&b.cast::<f32>()), stride, pad, false).unwrap();
        for (a, r) in fast32.data().iter().zip(slow.data()) {
            prop_assert!((*a as f64 - r).abs() < 1e-5 * (1.0 + r.abs()));
        }
    }
}

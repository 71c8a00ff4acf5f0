use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn strict() -> GradCheckOptions {
    GradCheckOptions {
        tol: 1e-6,
        ..Default::default()
    }
}

#[test]
fn conv_identity_kernel() {
    let x = random(&[2, 1, 3, 4, 5], 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full([1, 1, 1, 1, 1], 1.0));
    let y = g.conv3d(xv, w, None, ConvSpec::UNIT).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_zero_input_zero_output() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 5, 5]));
    let w = g.constant(random(&[3, 2, 3, 3, 3], 2));
    let b = g.constant(Tensor::zeros([3]));
    let y = g.conv3d(x, w, Some(b), ConvSpec::same([3, 3, 3], [1, 1, 1])).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 4, 5, 5]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_output_extents_and_errors() {
    let spec = ConvSpec::new([2, 1, 1], [1, 0, 0]);
    assert_eq!(spec.conv_output([8, 5, 5], [3, 3, 3]).unwrap(), [4, 3, 3]);
    assert!(ConvSpec::UNIT.conv_output([2, 5, 5], [3, 3, 3]).is_err());
    assert!(ConvSpec::new([0, 1, 1], [0; 3]).conv_output([4, 4, 4], [1, 1, 1]).is_err());

    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4, 4]));
    let w = g.constant(Tensor::zeros([3, 1, 3, 3, 3]));
    let err = g.conv3d(x, w, None, ConvSpec::UNIT).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let x = random(&[1, 2, 4, 5, 5], 3);
    let w = random(&[3, 2, 3, 3, 3], 4);
    let b = random(&[3], 5);
    for spec in [ConvSpec::UNIT, ConvSpec::same([3, 3, 3], [1, 1, 1]), ConvSpec::new([2, 1, 2], [1, 1, 0])] {
        let r = grad_check(
            |g, v| g.conv3d(v[0], v[1], Some(v[2]), spec),
            &[x.clone(), w.clone(), b.clone()],
            &strict(),
        )
        .unwrap();
        assert!(r.passed, "{spec:?}: {r:?}");
    }
}

#[test]
fn conv_small_single_channel_gradcheck() {
    let x = random(&[1, 1, 3, 4, 4], 6);
    let w = random(&[1, 1, 3, 3, 3], 7);
    let r = grad_check(|g, v| g.conv3d(v[0], v[1], None, ConvSpec::same([3, 3, 3], [1, 1, 1])), &[x, w], &strict()).unwrap();
    assert!(r.passed && r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn conv_transpose_shapes_and_identity() {
    let spec = ConvSpec::new([2, 1, 1], [0, 0, 0]);
    assert_eq!(spec.transpose_output([8, 3, 3], [2, 1, 1]).unwrap(), [16, 3, 3]);
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[1, 2, 8, 3, 3], 8));
    let w = g.constant(random(&[2, 4, 2, 1, 1], 9));
    let y = g.conv_transpose3d(x, w, None, spec).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 4, 16, 3, 3]);

    let x = random(&[1, 1, 4, 3, 2], 10);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full([1, 1, 1, 1, 1], 1.0));
    let y = g.conv_transpose3d(xv, w, None, ConvSpec::UNIT).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for the same weight tensor.
    let spec = ConvSpec::new([2, 1, 1], [1, 1, 1]);
    let x = random(&[1, 2, 5, 4, 4], 11);
    let w = random(&[3, 2, 3, 3, 3], 12);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let cx = g.conv3d(xv, wv, None, spec).unwrap();
    let y = random(g.value(cx).shape(), 13);
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let yv = g.constant(y);
    let ty = g.conv_transpose3d(yv, wv, None, spec).unwrap();
    assert_eq!(g.value(ty).shape(), x.shape());
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn conv_transpose_gradcheck() {
    let spec = ConvSpec::new([2, 1, 1], [1, 0, 0]);
    let r = grad_check(
        |g, v| g.conv_transpose3d(v[0], v[1], Some(v[2]), spec),
        &[random(&[2, 3, 4, 2, 2], 14), random(&[3, 2, 4, 1, 1], 15), random(&[2], 16)],
        &strict(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 2, 4, 4, 4], 0.7));
    let y = g.max_pool3d(x, [2, 2, 2], [2, 2, 2]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));

    let x = g.constant(Tensor::new([1, 1, 4, 1, 1], vec![1.0, 3.0, 2.0, 4.0]).unwrap());
    let y = g.max_pool3d(x, [2, 1, 1], [2, 1, 1]).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 4.0]);

    let x = g.constant(Tensor::zeros([1, 1, 2, 2, 2]));
    assert!(g.max_pool3d(x, [3, 1, 1], [1, 1, 1]).is_err());
}

#[test]
fn maxpool_ties_route_to_first() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([1, 1, 1, 1, 4], vec![2.0, 2.0, 1.0, 2.0]).unwrap());
    let y = g.max_pool3d(x, [1, 1, 4], [1, 1, 1]).unwrap();
    let grads = g.backward(y, Tensor::full([1, 1, 1, 1, 1], 1.0)).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_gradcheck_distinct_values() {
    // A shuffled ramp keeps every window's maximum well separated.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 2 * 4 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new([1, 2, 4, 4, 4], vals).unwrap();
    let r = grad_check(|g, v| g.max_pool3d(v[0], [2, 2, 2], [2, 2, 2]), &[x], &strict()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn batch_norm_examples() {
    // Two samples with values +-1 per channel: already zero-mean unit-variance.
    let data: Vec<f64> = (0..2 * 2 * 4).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let x = Tensor::new([2, 2, 4, 1, 1], data).unwrap();
    let mut stats = RunningStats::new(2);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::full([2], 1.0));
    let beta = g.constant(Tensor::zeros([2]));
    let y = g.batch_norm3d(xv, gamma, beta, 1e-5, NormMode::Train, &mut stats).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    assert!((stats.mean[0]).abs() < 1e-12);

    let c = g.constant(Tensor::full([2, 2, 3, 2, 2], 4.2));
    let y = g.batch_norm3d(c, gamma, beta, 1e-5, NormMode::Train, &mut stats).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));
    assert!(g.batch_norm3d(c, gamma, beta, 0.0, NormMode::Train, &mut stats).is_err());
}

#[test]
fn batch_norm_updates_running_stats_with_momentum() {
    let x = Tensor::new([1, 1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
    let mut stats = RunningStats::new(1);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full([1], 1.0));
    let beta = g.constant(Tensor::zeros([1]));
    g.batch_norm3d(xv, gamma, beta, 1e-5, NormMode::Train, &mut stats).unwrap();
    // mean 2, unbiased variance 2
    assert!((stats.mean[0] - 0.2).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-12);
    let before = stats.clone();
    g.batch_norm3d(xv, gamma, beta, 1e-5, NormMode::Eval, &mut stats).unwrap();
    assert_eq!(stats, before);
}

#[test]
fn batch_norm_gradcheck_both_modes() {
    for mode in [NormMode::Train, NormMode::Eval] {
        let r = grad_check(
            |g, v| {
                let mut stats = RunningStats::new(3);
                stats.mean = vec![0.1, -0.2, 0.3];
                stats.var = vec![0.5, 1.5, 2.0];
                g.batch_norm3d(v[0], v[1], v[2], 1e-5, mode, &mut stats)
            },
            &[random(&[2, 3, 3, 2, 2], 18), random(&[3], 19), random(&[3], 20)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{mode:?}: {r:?}");
    }
}

#[test]
fn elu_values_and_gradcheck() {
    assert_eq!(elu(2.0f64, 1.0), 2.0);
    assert!((elu(-20.0f64, 1.0) + 1.0).abs() < 1e-8);
    assert_eq!(elu(0.0f64, 1.0), 0.0);

    let mut x = random(&[1, 1, 2, 3, 3], 21);
    x.data_mut()[4] = 0.0;
    let opts = GradCheckOptions {
        skip: Some(|_, _, v| v.abs() < 1e-4),
        ..Default::default()
    };
    let r = grad_check(|g, v| Ok(g.elu(v[0], 1.0)), &[x], &opts).unwrap();
    assert!(r.passed, "{r:?}");
    assert_eq!(r.skipped, vec![(0, 4)]);
}

#[test]
fn zero_function_has_zero_error() {
    let r = grad_check(
        |g, v| {
            let z = g.constant(Tensor::zeros([1]));
            let _ = v;
            Ok(z)
        },
        &[random(&[3], 22)],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    assert_eq!(r.max_abs_error, 0.0);
    assert!(r.passed);
}

#[test]
fn gradcheck_flags_non_finite() {
    let x = Tensor::new([1, 1, 1, 1, 1], vec![f64::NAN]).unwrap();
    let err = grad_check(|g, v| Ok(g.elu(v[0], 1.0)), &[x], &GradCheckOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

#[test]
fn structural_ops_gradcheck() {
    let r = grad_check(
        |g, v| {
            let d = g.temporal_difference(v[0])?;
            let c = g.concat_channels(d, v[1])?;
            let s = g.add(c, v[2])?;
            let m = g.spatial_mean(s)?;
            g.reshape(m, [2, 3 * 4])
        },
        &[random(&[2, 1, 4, 2, 3], 23), random(&[2, 2, 4, 2, 3], 24), random(&[2, 3, 4, 2, 3], 25)],
        &strict(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn reparam_gradient_coefficients() {
    let eps = vec![0.3, -1.2, 2.0];
    let r = grad_check(
        |g, v| g.reparameterize(v[0], v[1], vec![0.3, -1.2, 2.0]),
        &[random(&[3], 26), random(&[3], 27)],
        &strict(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");

    let mut g = Graph::<f64>::new();
    let mu = g.param(Tensor::new([3], vec![0.0; 3]).unwrap());
    let rho = g.param(Tensor::new([3], vec![-1.0, 0.0, 1.0]).unwrap());
    let w = g.reparameterize(mu, rho, eps.clone()).unwrap();
    let grads = g.backward(w, Tensor::full([3], 1.0)).unwrap();
    assert_eq!(grads.get(mu).unwrap().data(), &[1.0; 3]);
    for (i, &d) in grads.get(rho).unwrap().data().iter().enumerate() {
        let rho = [-1.0f64, 0.0, 1.0][i];
        assert!((d - eps[i] * sigmoid(rho)).abs() < 1e-15);
    }
}

#[test]
fn backward_twice_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(1.0));
    let y = g.elu(x, 1.0);
    g.backward_scalar(y).unwrap();
    assert!(matches!(g.backward_scalar(y), Err(Error::Graph(_))));
    g.reset();
    let x = g.param(Tensor::scalar(-1.0));
    let y = g.elu(x, 1.0);
    assert!(g.backward_scalar(y).is_ok());
}

#[test]
fn temporal_difference_rejects_single_frame() {
    assert!(temporal_difference(&Tensor::<f64>::zeros([1, 1, 1, 2, 2])).is_err());
}

#[test]
fn softplus_is_positive_and_inverts() {
    for y in [1e-6, 0.05, 0.6931, 3.0, 25.0] {
        assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-9 * y.max(1.0));
    }
    assert!(softplus(-40.0f64) > 0.0 && softplus(-40.0f64) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear(seed in 0u64..1000, a in -3.0f64..3.0) {
        let x = random(&[1, 2, 3, 4, 4], seed);
        let w = random(&[2, 2, 3, 3, 3], seed + 1);
        let spec = ConvSpec::same([3, 3, 3], [1, 1, 1]);
        let mut g = Graph::new();
        let wv = g.constant(w.clone());
        let xv = g.constant(x.clone());
        let ax = g.constant(x.map(|v| a * v));
        let y = g.conv3d(xv, wv, None, spec).unwrap();
        let ay = g.conv3d(ax, wv, None, spec).unwrap();
        for (p, q) in g.value(y).data().iter().zip(g.value(ay).data()) {
            prop_assert!((a * p - q).abs() < 1e-10);
        }
        let aw = g.constant(w.map(|v| a * v));
        let y2 = g.conv3d(xv, aw, None, spec).unwrap();
        for (p, q) in g.value(y).data().iter().zip(g.value(y2).data()) {
            prop_assert!((a * p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_never_exceeds_input_max(seed in 0u64..1000) {
        let x = random(&[1, 2, 4, 4, 4], seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.max_pool3d(xv, [2, 2, 2], [1, 2, 2]).unwrap();
        let mx = x.data().iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(g.value(y).data().iter().all(|&v| v <= mx));
    }

    #[test]
    fn batch_norm_train_standardizes(seed in 0u64..1000, scale in 0.5f64..5.0, shift in -3.0f64..3.0) {
        let x = random(&[2, 3, 4, 3, 3], seed).map(|v| v * scale + shift);
        let mut stats = RunningStats::new(3);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full([3], 1.0));
        let beta = g.constant(Tensor::zeros([3]));
        let y = g.batch_norm3d(xv, gamma, beta, 1e-5, NormMode::Train, &mut stats).unwrap();
        let plane = 4 * 3 * 3;
        let moments = |t: &Tensor<f64>, c: usize| {
            let vals: Vec<f64> = (0..2).flat_map(|n| {
                let off = (n * 3 + c) * plane;
                t.data()[off..off + plane].to_vec()
            }).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, v)
        };
        for c in 0..3 {
            let (_, vx) = moments(g.value(xv), c);
            let (m, v) = moments(g.value(y), c);
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - vx / (vx + 1e-5)).abs() < 1e-9);
        }
    }
}

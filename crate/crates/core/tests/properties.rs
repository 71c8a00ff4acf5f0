use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bayesphys::bayes::{kl_to_prior, PriorSpec};
use bayesphys::losses::{pearson_loss, snr_term, total_loss, LossConfig};
use bayesphys::network::{build_network, NetConfig};
use bayesphys::signal::{add_noise, estimate_hr, normalize_signal, BandSpec, BvpTrace};
use bayesphys::synth::{generate_clip, SynthSpec};
use bayesphys::tensor::Tensor;
use bayesphys::trainer::cosine_lr;
use bayesphys::uncertainty::{coverage_at_z, spearman, McPrediction};

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn tone(bpm: f64, n: usize, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * bpm / 60.0 * i as f64 / 30.0 + phase).sin())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_loss_is_bounded_and_zero_for_affine(seed in 0u64..10_000, a in 0.01f64..50.0, b in -10.0f64..10.0) {
        let (n, t) = (3, 24);
        let y = Tensor::new([n, t], normals(n * t, seed)).unwrap();
        let p = Tensor::new([n, t], normals(n * t, seed + 1)).unwrap();
        let (loss, _) = pearson_loss(&p, &y).unwrap();
        prop_assert!((0.0..=2.0).contains(&loss.value));
        let affine = y.map(|v| a * v + b);
        let (loss, _) = pearson_loss(&affine, &y).unwrap();
        prop_assert!(loss.value.abs() < 1e-9, "{}", loss.value);
    }

    #[test]
    fn snr_is_clipped_and_falls_with_error(seed in 0u64..10_000, s1 in 0.0f64..2.0, ds in 0.01f64..2.0) {
        let cfg = LossConfig::default();
        let t = 32;
        let p = Tensor::new([1, t], normals(t, seed)).unwrap();
        let d = normals(t, seed + 7);
        let target = |s: f64| Tensor::new([1, t], p.data().iter().zip(&d).map(|(p, d)| p + s * d).collect()).unwrap();
        let near = snr_term(&p, &target(s1), &cfg).unwrap().value;
        let far = snr_term(&p, &target(s1 + ds), &cfg).unwrap().value;
        prop_assert!(near.abs() <= cfg.snr_clip_db && far.abs() <= cfg.snr_clip_db);
        prop_assert!(far <= near, "{near} -> {far}");
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences(seed in 0u64..10_000, kl in 0.0f64..100.0) {
        let (n, t) = (2, 16);
        let y = Tensor::new([n, t], normals(n * t, seed)).unwrap();
        let p0 = normals(n * t, seed + 1);
        let cfg = LossConfig { snr_clip_db: 1e3, ..Default::default() };
        let f = |p: &[f64]| total_loss(&Tensor::new([n, t], p.to_vec()).unwrap(), &y, kl, 0.25, &cfg).unwrap();
        let grad = f(&p0).grad;
        let h = 1e-5;
        for j in 0..n * t {
            let mut q = p0.clone();
            q[j] += h;
            let up = f(&q).total;
            q[j] -= 2.0 * h;
            let down = f(&q).total;
            let num = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
            prop_assert!(rel < 1e-4, "elem {j}: {a} vs {num}");
        }
    }

    #[test]
    fn total_loss_ignores_batch_order(seed in 0u64..10_000, shift in 1usize..4) {
        let (n, t) = (4, 20);
        let y = normals(n * t, seed);
        let p = normals(n * t, seed + 1);
        let rotate = |v: &[f64]| -> Vec<f64> {
            (0..n).flat_map(|i| v[((i + shift) % n) * t..((i + shift) % n + 1) * t].to_vec()).collect()
        };
        let cfg = LossConfig::default();
        let a = total_loss(&Tensor::new([n, t], p.clone()).unwrap(), &Tensor::new([n, t], y.clone()).unwrap(), 3.0, 0.5, &cfg).unwrap();
        let b = total_loss(&Tensor::new([n, t], rotate(&p)).unwrap(), &Tensor::new([n, t], rotate(&y)).unwrap(), 3.0, 0.5, &cfg).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12);
        let ga = rotate(a.grad.data());
        for (x, y) in ga.iter().zip(b.grad.data()) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-2.0f64..2.0, 1..20), rho_shift in -6.0f64..3.0,
                          mean in -1.0f64..1.0, std in 0.01f64..2.0) {
        let rho: Vec<f64> = mu.iter().enumerate().map(|(i, _)| rho_shift + 0.1 * i as f64).collect();
        let kl = kl_to_prior(&mu, &rho, &PriorSpec { mean, std });
        prop_assert!(kl >= -1e-12, "{kl}");
    }

    #[test]
    fn spearman_survives_increasing_transforms(seed in 0u64..10_000, n in 3usize..60) {
        let x = normals(n, seed);
        let y: Vec<f64> = x.iter().zip(normals(n, seed + 1)).map(|(a, b)| a + b).collect();
        let base = spearman(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let ty: Vec<f64> = y.iter().map(|v| v.powi(3) + 5.0 * v).collect();
        let moved = spearman(&tx, &ty).unwrap();
        prop_assert_eq!(base.rho, moved.rho);
        prop_assert_eq!(base.p_value, moved.p_value);
    }

    #[test]
    fn coverage_is_monotone_in_z(seed in 0u64..10_000, z1 in 0.0f64..3.0, dz in 0.0f64..2.0) {
        let m = normals(50, seed);
        let s: Vec<f64> = normals(50, seed + 1).iter().map(|v| v.abs()).collect();
        let t = normals(50, seed + 2);
        let (lo, _) = coverage_at_z(&m, &s, &t, z1).unwrap();
        let (hi, _) = coverage_at_z(&m, &s, &t, z1 + dz).unwrap();
        prop_assert!(hi >= lo);
    }

    #[test]
    fn hr_variance_is_population_variance(hr in prop::collection::vec(40.0f64..180.0, 1..40)) {
        let p = McPrediction::from_passes(vec![], hr.clone()).unwrap();
        let k = hr.len() as f64;
        let mean = hr.iter().sum::<f64>() / k;
        let var = hr.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / k;
        prop_assert!((p.hr_variance - var).abs() < 1e-12);
        prop_assert!((p.hr_mean - mean).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent(v in prop::collection::vec(-1e3f64..1e3, 2..200)) {
        prop_assume!(v.iter().any(|&a| a != v[0]));
        let once = normalize_signal(&v).unwrap();
        let twice = normalize_signal(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_is_reproducible(seed in 0u64..10_000, level in 0.0f64..0.2) {
        let clip = Tensor::from_fn([3, 4, 5, 5], |i| (i % 7) as f32 / 7.0);
        let a = add_noise(&clip, level, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = add_noise(&clip, level, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn lr_schedule_never_increases(total in 1usize..500, lr in 1e-6f64..1e-1, frac in 0.0f64..1.0) {
        let lr_min = lr * frac;
        let seq: Vec<f64> = (0..=total).map(|t| cosine_lr(t, total, lr, lr_min)).collect();
        prop_assert!(seq.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn epoch_kl_sums_to_beta_kl(batches in 1usize..200, beta in 0.0f64..4.0, kl in 0.0f64..1e4) {
        let cfg = LossConfig { beta, ..Default::default() };
        let per_batch = cfg.beta * cfg.kl_factor(batches) * kl;
        let epoch = per_batch * batches as f64;
        prop_assert!((epoch - beta * kl).abs() <= 1e-9 * (beta * kl).max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hr_ignores_scale_and_offset(bpm in 45.0f64..170.0, phase in 0.0f64..6.0, a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let band = BandSpec::default();
        let x = tone(bpm, 256, phase);
        let base = estimate_hr(&BvpTrace::new(x.clone(), 30.0).unwrap(), &band).unwrap();
        let moved = estimate_hr(&BvpTrace::new(x.iter().map(|v| a * v + b).collect(), 30.0).unwrap(), &band).unwrap();
        prop_assert!((base - moved).abs() < 1e-6, "{base} vs {moved}");
    }

    #[test]
    fn generated_pulse_normalizes_to_unit_range(seed in 0u64..1000, hr in 50.0f64..150.0) {
        let spec = SynthSpec { hr_bpm: hr, seed, height: 8, width: 8, ..Default::default() };
        let (_, bvp) = generate_clip(&spec).unwrap();
        let n = normalize_signal(&bvp.samples).unwrap();
        let (lo, hi) = n.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert_eq!((lo, hi), (-1.0, 1.0));
    }

    #[test]
    fn output_length_matches_input(t_blocks in 1usize..5, s1 in prop::sample::select(vec![1usize, 2]),
                                   s2 in prop::sample::select(vec![1usize, 2])) {
        let strides = vec![s1, s2];
        let t = 4 * t_blocks;
        let cfg = NetConfig {
            input_shape: [3, t, 16, 16],
            stem_channels: 2,
            diff_channels: 2,
            encoder_channels: vec![3, 4],
            decoder_channels: vec![3, 2],
            decoder_strides: strides,
            ..Default::default()
        };
        let net = build_network(&cfg).unwrap();
        let clip = Tensor::from_fn([1, 3, t, 16, 16], |i| (i % 11) as f32 / 11.0);
        let out = net
            .forward(&clip, bayesphys::bayes::WeightMode::Sample, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        prop_assert_eq!(out.shape(), &[1, t]);
    }
}

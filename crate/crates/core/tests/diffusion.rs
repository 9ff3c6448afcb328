use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use udig_core::diffusion::{
    diffusion_purify, forward_perturb, forward_perturb_with, make_schedule, reverse_update, train_score_model,
    NoiseSchedule, PurifierConfig, ScheduleKind, ScheduleSpec, TrainConfig, ZeroScore,
};
use udig_core::nets::{build_score_net, ArchSpec};
use udig_core::simdata::{generate_phantom, PhantomSpec};
use udig_core::Image;

#[test]
fn alpha_bar_recursion_and_monotonicity() {
    for (t, lo, hi) in [(1, 0.01, 0.01), (50, 1e-3, 0.05), (300, 1e-4, 0.02), (1000, 1e-4, 0.02)] {
        let s = make_schedule(t, lo, hi, ScheduleKind::Linear).unwrap();
        let mut prod = 1.0;
        for i in 1..=t {
            let b = s.beta(i);
            assert!(b > 0.0 && b < 1.0);
            prod *= 1.0 - b;
            assert!((s.alpha_bar(i) - s.alpha_bar(i - 1) * (1.0 - b)).abs() < 1e-12);
            assert!((s.alpha_bar(i) - prod).abs() < 1e-12);
            assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
        }
    }
    let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
    assert!(s.alpha_bar(1000) < 1e-4);
}

#[test]
fn noiseless_single_step_scales_by_root_alpha() {
    let s = make_schedule(5, 0.01, 0.05, ScheduleKind::Linear).unwrap();
    let x = Image::from_vec(1, 1, 3, vec![1.0, -2.0, 0.5]).unwrap();
    let out = forward_perturb_with(&x, 1, &s, &Image::zeros(1, 1, 3)).unwrap();
    for (o, v) in out.data.iter().zip(&x.data) {
        assert!((o - 0.99f64.sqrt() * v).abs() < 1e-15);
    }
}

/// Mean and unbiased variance with their standard errors.
fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

#[test]
fn forward_perturb_moments_within_three_standard_errors() {
    let s = NoiseSchedule::new(ScheduleSpec::default()).unwrap();
    let x = Image::from_vec(1, 1, 2, vec![0.8, -0.3]).unwrap();
    let n = 10_000;
    for m in [1usize, 20, 150] {
        let ab = s.alpha_bar(m);
        let draws: Vec<Image> = (0..n).map(|seed| forward_perturb(&x, m, &s, seed as u64).unwrap()).collect();
        for p in 0..2 {
            let v: Vec<f64> = draws.iter().map(|d| d.data[p]).collect();
            let (mean, var) = moments(&v);
            let se_mean = ((1.0 - ab) / n as f64).sqrt();
            let se_var = (1.0 - ab) * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((mean - ab.sqrt() * x.data[p]).abs() < 3.0 * se_mean, "m={m} mean {mean}");
            assert!((var - (1.0 - ab)).abs() < 3.0 * se_var, "m={m} var {var}");
        }
    }
}

#[test]
fn chained_single_steps_match_direct_perturbation() {
    let s = make_schedule(40, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
    let m = 25;
    let x0 = 0.7;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let chained: Vec<f64> = (0..n)
        .map(|_| {
            let mut v = x0;
            for i in 1..=m {
                let b = s.beta(i);
                let e: f64 = StandardNormal.sample(&mut rng);
                v = (1.0 - b).sqrt() * v + b.sqrt() * e;
            }
            v
        })
        .collect();
    let img = Image::from_vec(1, 1, 1, vec![x0]).unwrap();
    let direct: Vec<f64> = (0..n)
        .map(|seed| forward_perturb(&img, m, &s, 50_000 + seed as u64).unwrap().data[0])
        .collect();
    let ab = s.alpha_bar(m);
    let se_mean = ((1.0 - ab) / n as f64).sqrt();
    let se_var = (1.0 - ab) * (2.0 / (n as f64 - 1.0)).sqrt();
    let (mc, vc) = moments(&chained);
    let (md, vd) = moments(&direct);
    assert!((mc - ab.sqrt() * x0).abs() < 3.0 * se_mean);
    assert!((vc - (1.0 - ab)).abs() < 3.0 * se_var);
    // two independent samples: the difference has √2 times the standard error
    assert!((mc - md).abs() < 3.0 * 2f64.sqrt() * se_mean);
    assert!((vc - vd).abs() < 3.0 * 2f64.sqrt() * se_var);
}

#[test]
fn zero_depth_purification_is_bit_identity() {
    let s = NoiseSchedule::new(ScheduleSpec::default()).unwrap();
    let x = generate_phantom(&PhantomSpec::random_ellipses(16, 4, 3)).unwrap();
    let net = build_score_net(ArchSpec::score(1, 4, 2, s.steps()), 1).unwrap();
    let a = diffusion_purify(&x, &PurifierConfig::new(0), &net, &s, 5).unwrap();
    let b = diffusion_purify(&x, &PurifierConfig::new(0), &ZeroScore, &s, 6).unwrap();
    assert!(a.data.iter().zip(&x.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(b.data.iter().zip(&x.data).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn reverse_update_limits() {
    let x = Image::from_vec(1, 1, 2, vec![2.0, -1.0]).unwrap();
    let score = Image::from_vec(1, 1, 2, vec![5.0, 3.0]).unwrap();
    assert_eq!(reverse_update(&x, &score, 0.0, None), x);
    let zero = Image::zeros(1, 1, 2);
    let out = reverse_update(&x, &zero, 0.04, None);
    for (o, v) in out.data.iter().zip(&x.data) {
        assert!((o - v / 0.96f64.sqrt()).abs() < 1e-15);
    }
}

#[test]
fn purification_is_seeded() {
    let s = NoiseSchedule::new(ScheduleSpec::default()).unwrap();
    let x = generate_phantom(&PhantomSpec::random_ellipses(16, 4, 8)).unwrap();
    let net = build_score_net(ArchSpec::score(1, 4, 2, s.steps()), 2).unwrap();
    let cfg = PurifierConfig::new(6);
    let a = diffusion_purify(&x, &cfg, &net, &s, 1).unwrap();
    assert_eq!(a, diffusion_purify(&x, &cfg, &net, &s, 1).unwrap());
    assert_ne!(a, diffusion_purify(&x, &cfg, &net, &s, 2).unwrap());
    assert!(diffusion_purify(&x, &PurifierConfig::new(301), &net, &s, 1).is_err());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let s = make_schedule(20, 1e-3, 0.05, ScheduleKind::Linear).unwrap();
    let data: Vec<Image> = (0..8)
        .map(|k| generate_phantom(&PhantomSpec::random_ellipses(16, 3, k)).unwrap())
        .collect();
    let cfg = TrainConfig {
        arch: ArchSpec::score(1, 4, 2, 20),
        epochs: 30,
        batch: 4,
        lr: 3e-3,
        seed: 4,
        final_lr_fraction: 1.0,
        max_train_timestep: None,
        flip_augment: true,
    };
    let a = train_score_model(&data, &s, &cfg).unwrap();
    let b = train_score_model(&data, &s, &cfg).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.net.params, b.net.params);
    let head = a.loss_trace[..3].iter().sum::<f64>();
    let tail = a.loss_trace[a.loss_trace.len() - 3..].iter().sum::<f64>();
    assert!(tail < head, "{:?}", a.loss_trace);
}

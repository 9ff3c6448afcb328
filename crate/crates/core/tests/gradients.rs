//! Analytic parameter gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udig_core::nets::{build_score_net, build_unet, loss_gradient, ArchSpec, Network, Tensor};
use udig_core::operators::{cartesian_mask, simulate_smaps, CtOperator, LinearOperator, MriOperator};
use udig_core::udig::{udig_loss, udig_loss_grad};
use udig_core::Image;


fn random_image(channels: usize, n: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * n * n).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::from_vec(channels, n, n, data).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

/// Checks `n_coords` random parameters of `net` against central differences of `f`.
fn check(net: &Network, f: impl Fn(&Network) -> f64, analytic: &[f64], h: f64, n_coords: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_coords {
        let i = rng.random_range(0..net.n_params());
        let mut plus = net.clone();
        plus.params[i] += h;
        let mut minus = net.clone();
        minus.params[i] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let e = rel_err(analytic[i], fd);
        assert!(e < 1e-3, "param {i}: analytic {} vs fd {fd} (rel {e})", analytic[i]);
        worst = worst.max(e);
    }
    assert!(worst.is_finite());
}

fn udig_objective_check(op: &dyn LinearOperator, lambda: f64, h: f64, seed: u64) {
    let [c, n, _] = op.image_shape();
    let net = build_unet(ArchSpec::unet(c, 8, 2), seed).unwrap();
    let x_true = random_image(c, n, seed + 1);
    let y = op.forward(&x_true).unwrap();
    // unit-peak input keeps pre-activations O(1), so a step of H never
    // crosses a LeakyReLU kink
    let aty = op.adjoint(&y).unwrap();
    let peak = aty.max_abs();
    let z = aty.map(|v| v / peak);
    let zt = Tensor::from_image(&z);
    let value = |net: &Network| {
        let f = net.apply(&z).unwrap();
        udig_loss(&f, &z, &y, op, lambda).unwrap()
    };
    let g = loss_gradient(&net, &zt, None, |out| {
        let f = out.to_image(0);
        let l = udig_loss(&f, &z, &y, op, lambda).unwrap();
        let d = udig_loss_grad(&f, &z, &y, op, lambda).unwrap();
        (l, Tensor::from_image(&d))
    })
    .unwrap();
    assert!((g.loss - value(&net)).abs() <= 1e-12 * g.loss.abs().max(1.0));
    check(&net, value, &g.grads, h, 10, seed + 2);
}

#[test]
fn udig_loss_gradient_through_unet_mri() {
    let op = MriOperator::new(cartesian_mask(16, 16, 4, 0.1, 3).unwrap(), simulate_smaps(2, 16, 16).unwrap()).unwrap();
    udig_objective_check(&op, 1.0, 1e-4, 10);
    udig_objective_check(&op, 0.0, 1e-4, 20);
}

#[test]
fn udig_loss_gradient_through_unet_ct() {
    let op = CtOperator::sparse_view(180, 18, 16, 16).unwrap();
    // ‖A‖ is large for the radon transform, so the loss curvature makes the
    // O(h²) truncation term visible at h = 1e-4; a smaller step isolates the
    // derivative itself.
    udig_objective_check(&op, 1.0, 1e-5, 30);
}

#[test]
fn score_net_gradient_with_time_conditioning() {
    let net = build_score_net(ArchSpec::score(1, 8, 2, 100), 5).unwrap();
    let x = Tensor::from_images(&[&random_image(1, 16, 6), &random_image(1, 16, 7)]);
    let ts = [3usize, 77];
    let target = random_image(1, 16, 8);
    let value = |net: &Network| {
        let out = net.forward(&x, Some(&ts)).unwrap();
        let hw = 256;
        out.data
            .iter()
            .enumerate()
            .map(|(k, v)| (v - target.data[k % hw]).powi(2))
            .sum::<f64>()
    };
    let g = loss_gradient(&net, &x, Some(&ts), |out| {
        let mut d = out.clone();
        let mut l = 0.0;
        for (k, v) in d.data.iter_mut().enumerate() {
            let r = *v - target.data[k % 256];
            l += r * r;
            *v = 2.0 * r;
        }
        (l, d)
    })
    .unwrap();
    check(&net, value, &g.grads, 1e-4, 10, 9);
}

#[test]
fn loss_value_closed_form() {
    let op = udig_core::operators::IdentityOperator { shape: [1, 2, 2] };
    let f = Image::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let z = Image::zeros(1, 2, 2);
    let y = op.forward(&f).unwrap();
    assert_eq!(udig_loss(&f, &z, &y, &op, 1.0).unwrap(), 2.0);
    assert_eq!(udig_loss(&f, &f, &y, &op, 3.0).unwrap(), 0.0);
    let y0 = op.forward(&z).unwrap();
    assert_eq!(udig_loss(&f, &z, &y0, &op, 0.0).unwrap(), 2.0);
}

use std::f64::consts::PI;

use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udig_core::operators::{
    adjoint_test_operator, cartesian_mask, operator_norm, select_views, simulate_smaps, CoilMaps, CtOperator,
    IdentityOperator, LinearOperator, MriOperator, SamplingMask, ScaledOperator,
};
use udig_core::Image;

fn random_image(channels: usize, rows: usize, cols: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Image::from_vec(channels, rows, cols, data).unwrap()
}

/// Centred unitary DFT evaluated as an explicit double sum.
fn brute_force_dft(x: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let (hr, hc) = ((rows / 2) as f64, (cols / 2) as f64);
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); rows * cols];
    for kr in 0..rows {
        for kc in 0..cols {
            let mut acc = Complex64::new(0.0, 0.0);
            for nr in 0..rows {
                for nc in 0..cols {
                    let phase = -2.0
                        * PI
                        * ((kr as f64 - hr) * (nr as f64 - hr) / rows as f64
                            + (kc as f64 - hc) * (nc as f64 - hc) / cols as f64);
                    acc += x[nr * cols + nc] * Complex64::from_polar(1.0, phase);
                }
            }
            out[kr * cols + kc] = acc * scale;
        }
    }
    out
}

fn as_complex(img: &Image) -> Vec<Complex64> {
    img.channel(0)
        .iter()
        .zip(img.channel(1))
        .map(|(&re, &im)| Complex64::new(re, im))
        .collect()
}

#[test]
fn mri_forward_matches_brute_force_dft() {
    for (rows, cols) in [(8, 8), (7, 9), (6, 5)] {
        let x = random_image(2, rows, cols, 11);
        let op = MriOperator::new(SamplingMask::full(rows, cols), CoilMaps::unit(rows, cols)).unwrap();
        let y = op.forward(&x).unwrap();
        let expect = brute_force_dft(&as_complex(&x), rows, cols);
        for (p, e) in expect.iter().enumerate() {
            assert!((y.data[2 * p] - e.re).abs() < 1e-12, "{rows}x{cols} re at {p}");
            assert!((y.data[2 * p + 1] - e.im).abs() < 1e-12, "{rows}x{cols} im at {p}");
        }
    }
}

#[test]
fn multicoil_forward_is_dft_of_coil_images() {
    let (rows, cols, coils) = (8, 8, 3);
    let smaps = simulate_smaps(coils, rows, cols).unwrap();
    let mask = cartesian_mask(rows, cols, 2, 0.25, 5).unwrap();
    let op = MriOperator::new(mask.clone(), smaps.clone()).unwrap();
    let x = random_image(2, rows, cols, 3);
    let xc = as_complex(&x);
    let y = op.forward(&x).unwrap();
    for c in 0..coils {
        let coil_img: Vec<Complex64> = xc.iter().zip(smaps.coil(c)).map(|(a, s)| a * s).collect();
        let k = brute_force_dft(&coil_img, rows, cols);
        for r in 0..rows {
            for col in 0..cols {
                let p = r * cols + col;
                let q = c * rows * cols + p;
                let e = if mask.lines[r] { k[p] } else { Complex64::new(0.0, 0.0) };
                assert!((y.data[2 * q] - e.re).abs() < 1e-12);
                assert!((y.data[2 * q + 1] - e.im).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn adjoint_dot_product_both_modalities() {
    let mri = MriOperator::new(cartesian_mask(32, 32, 4, 0.08, 1).unwrap(), simulate_smaps(4, 32, 32).unwrap()).unwrap();
    assert!(adjoint_test_operator(&mri, 20, 7) < 1e-5);
    let ct = CtOperator::sparse_view(180, 18, 32, 32).unwrap();
    assert!(adjoint_test_operator(&ct, 20, 7) < 1e-5);
    let odd = CtOperator::new(vec![0.0, 33.3, 91.0, 179.5], 17, 23).unwrap();
    assert!(adjoint_test_operator(&odd, 20, 8) < 1e-5);
}

#[test]
fn full_mask_single_coil_normal_operator_is_identity() {
    let op = MriOperator::new(SamplingMask::full(24, 24), CoilMaps::unit(24, 24)).unwrap();
    let x = random_image(2, 24, 24, 9);
    let back = op.adjoint(&op.forward(&x).unwrap()).unwrap();
    let err = back.data.iter().zip(&x.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / x.norm();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn mask_projection_is_idempotent() {
    // With unit coils and unitary F, A Aᴴ is the mask projection on k-space.
    let op = MriOperator::new(cartesian_mask(16, 16, 4, 0.1, 2).unwrap(), CoilMaps::unit(16, 16)).unwrap();
    let y = op.forward(&random_image(2, 16, 16, 4)).unwrap();
    let once = op.forward(&op.adjoint(&y).unwrap()).unwrap();
    for (a, b) in once.data.iter().zip(&y.data) {
        assert!((a - b).abs() < 1e-12);
    }
    let twice = op.forward(&op.adjoint(&once).unwrap()).unwrap();
    for (a, b) in twice.data.iter().zip(&once.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn radon_of_disk_matches_chord_lengths() {
    let n = 256;
    let r = 80.0;
    let c = (n as f64 - 1.0) / 2.0;
    let mut disk = Image::zeros(1, n, n);
    // supersampled pixel coverage keeps the discrete disk close to the ideal one
    for i in 0..n {
        for j in 0..n {
            let mut inside = 0;
            for a in 0..4 {
                for b in 0..4 {
                    let y = i as f64 - 0.375 + 0.25 * a as f64 - c;
                    let x = j as f64 - 0.375 + 0.25 * b as f64 - c;
                    if x * x + y * y <= r * r {
                        inside += 1;
                    }
                }
            }
            disk.set(0, i, j, inside as f64 / 16.0);
        }
    }
    let op = CtOperator::new(vec![0.0, 27.0, 45.0, 90.0, 133.0], n, n).unwrap();
    let sino = op.forward(&disk).unwrap();
    for view in 0..5 {
        for d in 0..n {
            let s = d as f64 - c;
            if s.abs() > 0.9 * r {
                continue;
            }
            let expect = 2.0 * (r * r - s * s).sqrt();
            let got = sino.data[view * n + d];
            assert!((got - expect).abs() / expect < 0.03, "view {view} offset {s}: {got} vs {expect}");
        }
    }
}

#[test]
fn single_angle_ones_backprojects_to_constant_columns() {
    let op = CtOperator::new(vec![0.0], 12, 10).unwrap();
    let mut s = op.forward(&Image::zeros(1, 12, 10)).unwrap();
    s.data.iter_mut().for_each(|v| *v = 1.0);
    let img = op.adjoint(&s).unwrap();
    for c in 0..10 {
        for r in 0..12 {
            assert!((img.get(0, r, c) - img.get(0, 0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn view_fans() {
    let v18 = select_views(180, 18).unwrap();
    assert_eq!(v18, (0..18).map(|k| 10.0 * k as f64).collect::<Vec<_>>());
    let v30 = select_views(180, 30).unwrap();
    assert!(v30.windows(2).all(|w| (w[1] - w[0] - 6.0).abs() < 1e-12));
    assert_eq!(select_views(180, 180).unwrap().len(), 180);
}

#[test]
fn fifteen_coil_sensitivities_normalised() {
    let s = simulate_smaps(15, 40, 40).unwrap();
    assert!(s.sum_of_squares().iter().all(|v| (v - 1.0).abs() < 1e-6));
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    num / den
}

fn check_linearity(op: &dyn LinearOperator, alpha: f64, s1: u64, s2: u64) {
    let [c, r, k] = op.image_shape();
    let x1 = random_image(c, r, k, s1);
    let x2 = random_image(c, r, k, s2);
    let combo = Image::from_vec(c, r, k, x1.data.iter().zip(&x2.data).map(|(a, b)| alpha * a + b).collect()).unwrap();
    let lhs = op.forward(&combo).unwrap();
    let (y1, y2) = (op.forward(&x1).unwrap(), op.forward(&x2).unwrap());
    let rhs: Vec<f64> = y1.data.iter().zip(&y2.data).map(|(a, b)| alpha * a + b).collect();
    assert!(rel_diff(&lhs.data, &rhs) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operators_are_linear(alpha in -3.0f64..3.0, s1 in 0u64..1000, s2 in 0u64..1000, acc in 1usize..5) {
        let mri = MriOperator::new(cartesian_mask(16, 16, acc, 0.1, s1).unwrap(), simulate_smaps(2, 16, 16).unwrap()).unwrap();
        check_linearity(&mri, alpha, s1, s2);
        let ct = CtOperator::sparse_view(180, 6 * acc, 16, 16).unwrap();
        check_linearity(&ct, alpha, s1, s2);
    }

    #[test]
    fn mask_budget_and_acs(rows in 16usize..200, acc in 1usize..9, seed in 0u64..500) {
        let m = cartesian_mask(rows, 8, acc, 0.08, seed).unwrap();
        let budget = (rows as f64 / acc as f64).round() as usize;
        let acs = (0.08 * rows as f64).ceil() as usize;
        prop_assert!(m.sampled_lines().abs_diff(budget.max(acs.min(rows))) <= 1);
        let start = rows / 2 - acs / 2;
        prop_assert!((start..start + acs).all(|r| m.lines[r]));
    }
}

#[test]
fn operator_norm_of_unit_coil_mri_is_one() {
    let op = MriOperator::new(cartesian_mask(16, 16, 4, 0.08, 2).unwrap(), CoilMaps::unit(16, 16)).unwrap();
    assert!((operator_norm(&op, 50) - 1.0).abs() < 1e-9);
    let scaled = ScaledOperator::new(IdentityOperator { shape: [1, 5, 7] }, 4.0).unwrap();
    assert!((operator_norm(&scaled, 3) - 0.25).abs() < 1e-12);
}

#[test]
fn operator_norm_matches_dense_gram_eigenvalue() {
    let op = CtOperator::sparse_view(60, 6, 8, 8).unwrap();
    let n = op.image_len();
    // dense AᴴA, one column per basis vector
    let mut gram = vec![vec![0.0; n]; n];
    let mut e = vec![0.0; n];
    let mut ax = vec![0.0; op.measurement_len()];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        op.apply_into(&e, &mut ax);
        op.adjoint_into(&ax, &mut col);
        for i in 0..n {
            gram[i][j] = col[i];
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let w: Vec<f64> = gram.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|x| x * x).sum::<f64>();
        v = w.iter().map(|x| x / nw).collect();
    }
    let sigma = operator_norm(&op, 500);
    assert!((sigma * sigma - lambda).abs() < 1e-6 * lambda, "power {sigma}² vs dense {lambda}");
}

#[test]
fn unit_norm_operator_keeps_the_adjoint_pair() {
    let ct = CtOperator::sparse_view(180, 18, 16, 16).unwrap();
    let x = random_image(1, 16, 16, 3);
    let raw_y = ct.forward(&x).unwrap();
    let op = ScaledOperator::unit_norm(ct, 200).unwrap();
    assert!(adjoint_test_operator(&op, 20, 5) < 1e-5);
    assert!((operator_norm(&op, 200) - 1.0).abs() < 1e-6);
    let y = op.forward(&x).unwrap();
    let rescaled = op.rescale(&raw_y);
    assert!(rel_diff(&y.data, &rescaled.data) < 1e-12);
    assert!(ScaledOperator::new(IdentityOperator { shape: [1, 2, 2] }, 0.0).is_err());
}

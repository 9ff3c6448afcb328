//! Synthetic ground truths and measurement simulation.
//!
//! `random_ellipses` phantoms are drawn as follows (coordinates in `[-1, 1]²`):
//!
//! * one body ellipse: centre in `[-0.1, 0.1]²`, semi-axes in `[0.6, 0.9]`,
//!   rotation in `[0, π)`, intensity in `[0.3, 0.7]`;
//! * `n_ellipses - 1` interior ellipses: centre in `[-0.45, 0.45]²`, semi-axes
//!   in `[0.06, 0.3]`, rotation in `[0, π)`, additive intensity in
//!   `[-0.3, 0.5]`, confined to the body;
//! * the sum is clipped to `[0, 1]`.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::operators::{CtOperator, LinearOperator, Measurements, MriOperator};
use crate::persistence::load_array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
    UserArray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub size: usize,
    #[serde(default = "default_n_ellipses")]
    pub n_ellipses: usize,
    #[serde(default)]
    pub seed: u64,
    /// Source container for `user_array`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_n_ellipses() -> usize {
    6
}

impl PhantomSpec {
    pub fn shepp_logan(size: usize) -> Self {
        Self {
            kind: PhantomKind::SheppLogan,
            size,
            n_ellipses: 10,
            seed: 0,
            path: None,
        }
    }

    pub fn random_ellipses(size: usize, n_ellipses: usize, seed: u64) -> Self {
        Self {
            kind: PhantomKind::RandomEllipses,
            size,
            n_ellipses,
            seed,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.sin_cos();
        let dx = x - self.x0;
        let dy = y - self.y0;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

// Modified Shepp-Logan: (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees)
const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

fn pixel_coords(size: usize, r: usize, c: usize) -> (f64, f64) {
    let x = (2.0 * c as f64 + 1.0) / size as f64 - 1.0;
    let y = 1.0 - (2.0 * r as f64 + 1.0) / size as f64;
    (x, y)
}

fn render(size: usize, body: Option<Ellipse>, ellipses: &[Ellipse]) -> Image {
    let mut img = Image::zeros(1, size, size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = pixel_coords(size, r, c);
            let mut v = 0.0;
            if let Some(b) = body {
                if !b.contains(x, y) {
                    continue;
                }
                v += b.value;
            }
            for e in ellipses {
                if e.contains(x, y) {
                    v += e.value;
                }
            }
            img.set(0, r, c, v.clamp(0.0, 1.0));
        }
    }
    img
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Image> {
    if spec.size < 16 {
        return Err(Error::invalid("phantom size must be at least 16"));
    }
    match spec.kind {
        PhantomKind::SheppLogan => {
            let ellipses: Vec<Ellipse> = SHEPP_LOGAN
                .iter()
                .map(|p| Ellipse {
                    value: p[0],
                    a: p[1],
                    b: p[2],
                    x0: p[3],
                    y0: p[4],
                    phi: p[5].to_radians(),
                })
                .collect();
            Ok(render(spec.size, None, &ellipses))
        }
        PhantomKind::RandomEllipses => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let body = Ellipse {
                x0: rng.random_range(-0.1..=0.1),
                y0: rng.random_range(-0.1..=0.1),
                a: rng.random_range(0.6..=0.9),
                b: rng.random_range(0.6..=0.9),
                phi: rng.random_range(0.0..PI),
                value: rng.random_range(0.3..=0.7),
            };
            let inner: Vec<Ellipse> = (1..spec.n_ellipses.max(1))
                .map(|_| Ellipse {
                    x0: rng.random_range(-0.45..=0.45),
                    y0: rng.random_range(-0.45..=0.45),
                    a: rng.random_range(0.06..=0.3),
                    b: rng.random_range(0.06..=0.3),
                    phi: rng.random_range(0.0..PI),
                    value: rng.random_range(-0.3..=0.5),
                })
                .collect();
            Ok(render(spec.size, Some(body), &inner))
        }
        PhantomKind::UserArray => {
            let path = spec
                .path
                .as_ref()
                .ok_or_else(|| Error::invalid("user_array phantom requires a path"))?;
            let arr = load_array(path)?;
            let dims: Vec<usize> = arr.shape.iter().copied().filter(|&d| d != 1).collect();
            if dims != [spec.size, spec.size] {
                return Err(Error::shape(&[spec.size, spec.size], &arr.shape));
            }
            let data = arr.to_f64().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Image::from_vec(1, spec.size, spec.size, data)
        }
    }
}

/// Complex ground truth with magnitude `phantom` and a smooth random
/// quadratic phase scaled by `phase_strength`, as (real, imaginary) channels.
pub fn make_mri_ground_truth(phantom: &Image, phase_strength: f64, seed: u64) -> Result<Image> {
    if phantom.channels != 1 {
        return Err(Error::invalid("phantom must be single-channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
    let (rows, cols) = (phantom.rows, phantom.cols);
    let mut out = Image::zeros(2, rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let x = 2.0 * c as f64 / (cols.max(2) - 1) as f64 - 1.0;
            let y = 2.0 * r as f64 / (rows.max(2) - 1) as f64 - 1.0;
            let field = coef[0] * x + coef[1] * y + 0.5 * (coef[2] * x * x + coef[3] * x * y + coef[4] * y * y);
            let phase = phase_strength * field;
            let m = phantom.get(0, r, c);
            out.set(0, r, c, m * phase.cos());
            out.set(1, r, c, m * phase.sin());
        }
    }
    Ok(out)
}

/// `y = A x + n` with complex Gaussian noise on sampled k-space entries only.
pub fn simulate_mri_measurements(op: &MriOperator, x_true: &Image, noise_sigma: f64, seed: u64) -> Result<Measurements> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    let mut y = op.forward(x_true)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        let (rows, cols) = (op.rows(), op.cols());
        let n = rows * cols;
        for coil in 0..op.smaps().n_coils {
            for r in 0..rows {
                if !op.mask().lines[r] {
                    continue;
                }
                for c in 0..cols {
                    let p = coil * n + r * cols + c;
                    y.data[2 * p] += normal.sample(&mut rng);
                    y.data[2 * p + 1] += normal.sample(&mut rng);
                }
            }
        }
    }
    Ok(y)
}

/// Incident photon count per ray for transmission CT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dose {
    /// Infinite dose: the post-log sinogram equals `A x`.
    Noiseless,
    Photons(f64),
}

#[derive(Debug, Clone)]
pub struct CtSimulation {
    pub measurements: Measurements,
    /// Detected photon counts; empty for the noiseless dose.
    pub counts: Vec<f64>,
    /// Attenuation scale `s = max(A x)` used in the exponent.
    pub scale: f64,
}

/// Poisson transmission measurements, returned as the post-log sinogram.
///
/// Line integrals are divided by `s = max(A x)` before exponentiation so the
/// exponents lie in `[0, 1]`; counts are clamped at 1 before the log and the
/// result is rescaled by `s`.
pub fn simulate_ct_measurements(op: &CtOperator, x_true: &Image, dose: Dose, seed: u64) -> Result<CtSimulation> {
    if x_true.data.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("attenuation image must be non-negative"));
    }
    let clean = op.forward(x_true)?;
    let scale = clean.data.iter().fold(0.0_f64, |m, &v| m.max(v));
    let i0 = match dose {
        Dose::Noiseless => {
            return Ok(CtSimulation {
                measurements: clean,
                counts: Vec::new(),
                scale,
            })
        }
        Dose::Photons(i0) if i0 > 0.0 && i0.is_finite() => i0,
        Dose::Photons(i0) => return Err(Error::invalid(format!("incident photon count {i0} must be positive"))),
    };
    if scale == 0.0 {
        let n = clean.data.len();
        return Ok(CtSimulation {
            measurements: clean,
            counts: vec![i0; n],
            scale,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = Vec::with_capacity(clean.data.len());
    let mut post = clean.clone();
    for (p, &line) in post.data.iter_mut().zip(&clean.data) {
        let mean = i0 * (-line / scale).exp();
        let c = Poisson::new(mean).map(|d| d.sample(&mut rng)).unwrap_or(0.0);
        counts.push(c);
        *p = -scale * (c.max(1.0) / i0).ln();
    }
    Ok(CtSimulation {
        measurements: post,
        counts,
        scale,
    })
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` to every entry.
pub fn add_gaussian_noise(y: &mut Measurements, sigma: f64, seed: u64) -> Result<()> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    y.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(())
}

/// Image-domain Gaussian perturbation `x + δ`, `δ ~ N(0, σ² I)`.
pub fn perturb_image(x: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if sigma == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{cartesian_mask, simulate_smaps, SamplingMask};

    #[test]
    fn shepp_logan_range() {
        let p = generate_phantom(&PhantomSpec::shepp_logan(256)).unwrap();
        let (lo, hi) = p.min_max();
        assert_eq!(hi, 1.0);
        assert_eq!(lo, 0.0);
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert!(generate_phantom(&PhantomSpec::shepp_logan(8)).is_err());
    }

    #[test]
    fn random_ellipses_deterministic_and_clipped() {
        let spec = PhantomSpec::random_ellipses(64, 6, 42);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let c = generate_phantom(&PhantomSpec::random_ellipses(64, 6, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mri_truth_magnitude_and_phase() {
        let p = generate_phantom(&PhantomSpec::shepp_logan(32)).unwrap();
        let flat = make_mri_ground_truth(&p, 0.0, 1).unwrap();
        assert_eq!(flat.channel(0), p.channel(0));
        assert!(flat.channel(1).iter().all(|&v| v == 0.0));
        let g = make_mri_ground_truth(&p, 2.5, 1).unwrap();
        let m = g.magnitude();
        assert!(m.data.iter().zip(&p.data).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(g, make_mri_ground_truth(&p, 2.5, 1).unwrap());
    }

    #[test]
    fn mri_noise_only_on_sampled_lines() {
        let mask = cartesian_mask(32, 32, 4, 0.08, 1).unwrap();
        let op = MriOperator::new(mask.clone(), simulate_smaps(2, 32, 32).unwrap()).unwrap();
        let p = generate_phantom(&PhantomSpec::shepp_logan(32)).unwrap();
        let x = make_mri_ground_truth(&p, 1.0, 2).unwrap();
        let clean = simulate_mri_measurements(&op, &x, 0.0, 3).unwrap();
        assert_eq!(clean, op.forward(&x).unwrap());
        let noisy = simulate_mri_measurements(&op, &x, 0.05, 3).unwrap();
        for coil in 0..2 {
            for r in 0..32 {
                for c in 0..32 {
                    let p = 2 * (coil * 1024 + r * 32 + c);
                    if !mask.lines[r] {
                        assert_eq!(noisy.data[p], 0.0);
                        assert_eq!(noisy.data[p + 1], 0.0);
                    }
                }
            }
        }
        assert!(simulate_mri_measurements(&op, &x, -1.0, 3).is_err());
        let full = MriOperator::new(SamplingMask::full(32, 32), simulate_smaps(1, 32, 32).unwrap()).unwrap();
        assert!(simulate_mri_measurements(&full, &x, 0.1, 0).is_ok());
    }

    #[test]
    fn ct_noiseless_and_zero() {
        let op = CtOperator::sparse_view(180, 18, 32, 32).unwrap();
        let p = generate_phantom(&PhantomSpec::shepp_logan(32)).unwrap();
        let sim = simulate_ct_measurements(&op, &p, Dose::Noiseless, 0).unwrap();
        assert_eq!(sim.measurements, op.forward(&p).unwrap());
        let zero = simulate_ct_measurements(&op, &Image::zeros(1, 32, 32), Dose::Photons(1e4), 0).unwrap();
        assert!(zero.counts.iter().all(|&c| c == 1e4));
        assert!(zero.measurements.data.iter().all(|&v| v == 0.0));
        assert!(simulate_ct_measurements(&op, &p, Dose::Photons(0.0), 0).is_err());
    }

    #[test]
    fn ct_unit_dose_is_extreme() {
        let op = CtOperator::sparse_view(180, 30, 32, 32).unwrap();
        let p = generate_phantom(&PhantomSpec::shepp_logan(32)).unwrap();
        let sim = simulate_ct_measurements(&op, &p, Dose::Photons(1.0), 9).unwrap();
        let low = sim.counts.iter().filter(|&&c| c <= 1.0).count();
        assert!(low as f64 > 0.8 * sim.counts.len() as f64);
        let again = simulate_ct_measurements(&op, &p, Dose::Photons(1.0), 9).unwrap();
        assert_eq!(sim.measurements, again.measurements);
    }
}

//! Matched forward/adjoint acquisition operators.
//!
//! Every operator maps a channel-first [`Image`] to a flat real measurement
//! vector. Complex-valued data is carried as interleaved `(re, im)` pairs, so
//! the real inner product of the flattened vectors equals the real part of the
//! complex inner product and the real-linear adjoint is the conjugate
//! transpose.

mod ct;
mod mri;

pub use ct::{select_views, CtOperator};
pub use mri::{cartesian_mask, simulate_smaps, CoilMaps, MriOperator, SamplingMask};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{dot, norm2, Image};

/// Flat measurement vector `y` with its logical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Measurements {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn check_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected || self.data.len() != expected.iter().product::<usize>() {
            return Err(Error::shape(expected, &self.shape));
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        dot(&self.data, &self.data)
    }
}

/// A linear map `A` together with its adjoint `A^H`.
pub trait LinearOperator: Send + Sync {
    fn image_shape(&self) -> [usize; 3];

    fn measurement_shape(&self) -> Vec<usize>;

    /// `out = A x` on flat buffers. `out` is overwritten.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);

    /// `out = A^H y` on flat buffers. `out` is overwritten.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    fn measurement_len(&self) -> usize {
        self.measurement_shape().iter().product()
    }

    fn forward(&self, x: &Image) -> Result<Measurements> {
        x.check_shape(self.image_shape())?;
        let mut y = Measurements::zeros(self.measurement_shape());
        self.apply_into(&x.data, &mut y.data);
        Ok(y)
    }

    fn adjoint(&self, y: &Measurements) -> Result<Image> {
        y.check_shape(&self.measurement_shape())?;
        let [c, r, k] = self.image_shape();
        let mut x = Image::zeros(c, r, k);
        self.adjoint_into(&y.data, &mut x.data);
        Ok(x)
    }

    fn geometry(&self) -> OperatorGeometry;
}

/// `A = I` on images of a fixed shape.
#[derive(Debug, Clone)]
pub struct IdentityOperator {
    pub shape: [usize; 3],
}

impl LinearOperator for IdentityOperator {
    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn measurement_shape(&self) -> Vec<usize> {
        self.shape.to_vec()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }

    fn geometry(&self) -> OperatorGeometry {
        OperatorGeometry {
            modality: "identity".into(),
            shape: self.shape.to_vec(),
            acceleration: None,
            n_views: None,
            seed: None,
        }
    }
}

/// `A / c` for a fixed positive `c`; the adjoint is scaled the same way.
#[derive(Debug, Clone)]
pub struct ScaledOperator<O> {
    pub inner: O,
    pub divisor: f64,
}

impl<O: LinearOperator> ScaledOperator<O> {
    pub fn new(inner: O, divisor: f64) -> Result<Self> {
        if !(divisor > 0.0 && divisor.is_finite()) {
            return Err(Error::invalid(format!("operator divisor {divisor} must be positive and finite")));
        }
        Ok(Self { inner, divisor })
    }

    /// Divides by the spectral norm, so that `‖A / c‖₂ = 1`.
    pub fn unit_norm(inner: O, iters: usize) -> Result<Self> {
        let c = operator_norm(&inner, iters);
        Self::new(inner, c)
    }

    /// Measurements of the unscaled operator expressed for this one.
    pub fn rescale(&self, y: &Measurements) -> Measurements {
        Measurements {
            shape: y.shape.clone(),
            data: y.data.iter().map(|v| v / self.divisor).collect(),
        }
    }
}

impl<O: LinearOperator> LinearOperator for ScaledOperator<O> {
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }

    fn measurement_shape(&self) -> Vec<usize> {
        self.inner.measurement_shape()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.inner.apply_into(x, out);
        out.iter_mut().for_each(|v| *v /= self.divisor);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.inner.adjoint_into(y, out);
        out.iter_mut().for_each(|v| *v /= self.divisor);
    }

    fn geometry(&self) -> OperatorGeometry {
        self.inner.geometry()
    }
}

/// Spectral norm `‖A‖₂` by power iteration on `AᴴA` from a constant start.
pub fn operator_norm(op: &dyn LinearOperator, iters: usize) -> f64 {
    let mut x = vec![1.0 / (op.image_len() as f64).sqrt(); op.image_len()];
    let mut ax = vec![0.0; op.measurement_len()];
    let mut aha = vec![0.0; op.image_len()];
    let mut sigma_sq = 0.0;
    for _ in 0..iters.max(1) {
        op.apply_into(&x, &mut ax);
        op.adjoint_into(&ax, &mut aha);
        sigma_sq = norm2(&aha);
        if sigma_sq == 0.0 {
            return 0.0;
        }
        x.iter_mut().zip(&aha).for_each(|(xi, v)| *xi = v / sigma_sq);
    }
    sigma_sq.sqrt()
}

/// JSON sidecar describing how an operator was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorGeometry {
    pub modality: String,
    pub shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acceleration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_views: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

/// Dot-product test of a forward/adjoint pair.
///
/// Returns the largest `|<Ax, y> - <x, A^H y>| / (‖Ax‖ ‖y‖)` over `n_trials`
/// Gaussian `(x, y)` draws.
pub fn adjoint_test(
    forward: impl Fn(&[f64], &mut [f64]),
    adjoint: impl Fn(&[f64], &mut [f64]),
    input_len: usize,
    output_len: usize,
    n_trials: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ax = vec![0.0; output_len];
    let mut ahy = vec![0.0; input_len];
    let mut worst = 0.0_f64;
    for _ in 0..n_trials {
        let x: Vec<f64> = (0..input_len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..output_len).map(|_| StandardNormal.sample(&mut rng)).collect();
        forward(&x, &mut ax);
        adjoint(&y, &mut ahy);
        let lhs = dot(&ax, &y);
        let rhs = dot(&x, &ahy);
        let denom = (norm2(&ax) * norm2(&y)).max(f64::MIN_POSITIVE);
        worst = worst.max((lhs - rhs).abs() / denom);
    }
    worst
}

/// [`adjoint_test`] for a [`LinearOperator`].
pub fn adjoint_test_operator(op: &dyn LinearOperator, n_trials: usize, seed: u64) -> f64 {
    adjoint_test(
        |x, out| op.apply_into(x, out),
        |y, out| op.adjoint_into(y, out),
        op.image_len(),
        op.measurement_len(),
        n_trials,
        seed,
    )
}

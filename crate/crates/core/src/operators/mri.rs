//! Multi-coil Cartesian MRI: `A = M F S`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};

use super::{LinearOperator, OperatorGeometry};
use crate::error::{Error, Result};
use crate::image::Image;

/// Binary phase-encode sampling pattern; `lines[r]` marks row `r` as acquired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    pub rows: usize,
    pub cols: usize,
    pub lines: Vec<bool>,
}

impl SamplingMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            lines: vec![true; rows],
        }
    }

    pub fn sampled_lines(&self) -> usize {
        self.lines.iter().filter(|&&b| b).count()
    }

    /// Dense `rows × cols` 0/1 view.
    pub fn to_dense(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for &on in &self.lines {
            out.extend(std::iter::repeat_n(on as u8, self.cols));
        }
        out
    }

    #[inline]
    pub fn at(&self, r: usize, _c: usize) -> bool {
        self.lines[r]
    }
}

/// Central fully sampled band plus uniformly random remaining lines, so that
/// `rows / acceleration` lines are acquired in total.
pub fn cartesian_mask(
    rows: usize,
    cols: usize,
    acceleration: usize,
    acs_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if acceleration < 1 {
        return Err(Error::invalid("acceleration must be at least 1"));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("mask must be non-empty"));
    }
    if acceleration == 1 {
        return Ok(SamplingMask::full(rows, cols));
    }
    if !(acs_fraction > 0.0 && acs_fraction < 1.0) {
        return Err(Error::invalid("acs_fraction must lie in (0, 1)"));
    }
    let budget = ((rows as f64) / acceleration as f64).round() as usize;
    let acs = (acs_fraction * rows as f64).ceil() as usize;
    if acs > budget {
        return Err(Error::invalid(format!(
            "central band of {acs} lines exceeds the {budget}-line budget"
        )));
    }
    let mut lines = vec![false; rows];
    let start = rows / 2 - acs / 2;
    lines[start..start + acs].iter_mut().for_each(|l| *l = true);
    let outer: Vec<usize> = (0..rows).filter(|&r| !lines[r]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, outer.len(), budget - acs).into_iter() {
        lines[outer[i]] = true;
    }
    Ok(SamplingMask { rows, cols, lines })
}

/// Complex coil sensitivities, `n_coils × rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilMaps {
    pub n_coils: usize,
    pub rows: usize,
    pub cols: usize,
    pub maps: Vec<Complex64>,
}

impl CoilMaps {
    pub fn unit(rows: usize, cols: usize) -> Self {
        Self {
            n_coils: 1,
            rows,
            cols,
            maps: vec![Complex64::new(1.0, 0.0); rows * cols],
        }
    }

    pub fn coil(&self, c: usize) -> &[Complex64] {
        let n = self.rows * self.cols;
        &self.maps[c * n..(c + 1) * n]
    }

    /// `Σ_c |S_c(p)|²` at every pixel.
    pub fn sum_of_squares(&self) -> Vec<f64> {
        let n = self.rows * self.cols;
        let mut out = vec![0.0; n];
        for c in 0..self.n_coils {
            for (o, s) in out.iter_mut().zip(self.coil(c)) {
                *o += s.norm_sqr();
            }
        }
        out
    }
}

/// Gaussian coil profiles centred on equispaced points around the field of
/// view, each with its own smooth phase ramp, normalised to unit
/// root-sum-of-squares at every pixel.
pub fn simulate_smaps(n_coils: usize, rows: usize, cols: usize) -> Result<CoilMaps> {
    if n_coils < 1 {
        return Err(Error::invalid("need at least one coil"));
    }
    let n = rows * cols;
    let mut maps = vec![Complex64::new(0.0, 0.0); n_coils * n];
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let half = 0.5 * rows.max(cols) as f64;
    let width = 0.6 * half;
    for c in 0..n_coils {
        let ang = 2.0 * PI * c as f64 / n_coils as f64;
        let (py, px) = (cy + half * ang.sin(), cx + half * ang.cos());
        for r in 0..rows {
            for k in 0..cols {
                let dy = r as f64 - py;
                let dx = k as f64 - px;
                let mag = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
                let phase = ang + 0.5 * PI * ((k as f64 - cx) * ang.cos() + (r as f64 - cy) * ang.sin()) / half;
                maps[c * n + r * cols + k] = Complex64::from_polar(mag, phase);
            }
        }
    }
    for p in 0..n {
        let ss: f64 = (0..n_coils).map(|c| maps[c * n + p].norm_sqr()).sum::<f64>().sqrt();
        for c in 0..n_coils {
            maps[c * n + p] /= ss;
        }
    }
    Ok(CoilMaps {
        n_coils,
        rows,
        cols,
        maps,
    })
}

/// `A = M F S` with a unitary, centred 2-D DFT per coil.
///
/// Images are 2-channel (real, imaginary). Measurements have shape
/// `[n_coils, rows, cols, 2]` and are zero on unsampled lines.
#[derive(Clone)]
pub struct MriOperator {
    mask: SamplingMask,
    smaps: CoilMaps,
    seed: Option<u64>,
    acceleration: Option<usize>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MriOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MriOperator")
            .field("rows", &self.mask.rows)
            .field("cols", &self.mask.cols)
            .field("n_coils", &self.smaps.n_coils)
            .field("sampled_lines", &self.mask.sampled_lines())
            .finish()
    }
}

impl MriOperator {
    pub fn new(mask: SamplingMask, smaps: CoilMaps) -> Result<Self> {
        if mask.rows != smaps.rows || mask.cols != smaps.cols {
            return Err(Error::shape(&[smaps.rows, smaps.cols], &[mask.rows, mask.cols]));
        }
        let ss = smaps.sum_of_squares();
        if ss.iter().any(|v| (v - 1.0).abs() > 1e-6) {
            return Err(Error::invalid("coil sensitivities are not normalised"));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            row_fwd: planner.plan_fft_forward(mask.cols),
            row_inv: planner.plan_fft_inverse(mask.cols),
            col_fwd: planner.plan_fft_forward(mask.rows),
            col_inv: planner.plan_fft_inverse(mask.rows),
            mask,
            smaps,
            seed: None,
            acceleration: None,
        })
    }

    /// Records how the mask was generated, for the geometry sidecar.
    pub fn with_provenance(mut self, acceleration: usize, seed: u64) -> Self {
        self.acceleration = Some(acceleration);
        self.seed = Some(seed);
        self
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn smaps(&self) -> &CoilMaps {
        &self.smaps
    }

    pub fn rows(&self) -> usize {
        self.mask.rows
    }

    pub fn cols(&self) -> usize {
        self.mask.cols
    }

    /// In-place centred unitary 2-D DFT (`inverse` selects the sign).
    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let (rows, cols) = (self.rows(), self.cols());
        ifftshift(buf, rows, cols);
        let (row_plan, col_plan) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row_plan.process(buf);
        let mut column = vec![Complex64::new(0.0, 0.0); rows];
        for k in 0..cols {
            for r in 0..rows {
                column[r] = buf[r * cols + k];
            }
            col_plan.process(&mut column);
            for r in 0..rows {
                buf[r * cols + k] = column[r];
            }
        }
        let scale = 1.0 / ((rows * cols) as f64).sqrt();
        buf.iter_mut().for_each(|v| *v *= scale);
        fftshift(buf, rows, cols);
    }

    pub fn mri_forward(&self, x: &Image) -> Result<super::Measurements> {
        self.forward(x)
    }

    pub fn mri_adjoint(&self, y: &super::Measurements) -> Result<Image> {
        self.adjoint(y)
    }
}

fn shift(buf: &mut [Complex64], rows: usize, cols: usize, dr: usize, dc: usize) {
    let src = buf.to_vec();
    for r in 0..rows {
        let rr = (r + dr) % rows;
        for c in 0..cols {
            buf[rr * cols + (c + dc) % cols] = src[r * cols + c];
        }
    }
}

fn fftshift(buf: &mut [Complex64], rows: usize, cols: usize) {
    shift(buf, rows, cols, rows / 2, cols / 2);
}

fn ifftshift(buf: &mut [Complex64], rows: usize, cols: usize) {
    shift(buf, rows, cols, rows - rows / 2, cols - cols / 2);
}

impl LinearOperator for MriOperator {
    fn image_shape(&self) -> [usize; 3] {
        [2, self.rows(), self.cols()]
    }

    fn measurement_shape(&self) -> Vec<usize> {
        vec![self.smaps.n_coils, self.rows(), self.cols(), 2]
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let (rows, cols) = (self.rows(), self.cols());
        let n = rows * cols;
        let (re, im) = x.split_at(n);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..self.smaps.n_coils {
            for (p, (b, s)) in buf.iter_mut().zip(self.smaps.coil(c)).enumerate() {
                *b = s * Complex64::new(re[p], im[p]);
            }
            self.fft2(&mut buf, false);
            let dst = &mut out[2 * c * n..2 * (c + 1) * n];
            for r in 0..rows {
                let on = self.mask.lines[r];
                for k in 0..cols {
                    let p = r * cols + k;
                    let v = if on { buf[p] } else { Complex64::new(0.0, 0.0) };
                    dst[2 * p] = v.re;
                    dst[2 * p + 1] = v.im;
                }
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let (rows, cols) = (self.rows(), self.cols());
        let n = rows * cols;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..self.smaps.n_coils {
            let src = &y[2 * c * n..2 * (c + 1) * n];
            for r in 0..rows {
                let on = self.mask.lines[r];
                for k in 0..cols {
                    let p = r * cols + k;
                    buf[p] = if on {
                        Complex64::new(src[2 * p], src[2 * p + 1])
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                }
            }
            self.fft2(&mut buf, true);
            let (re, im) = out.split_at_mut(n);
            for (p, (b, s)) in buf.iter().zip(self.smaps.coil(c)).enumerate() {
                let v = s.conj() * b;
                re[p] += v.re;
                im[p] += v.im;
            }
        }
    }

    fn geometry(&self) -> OperatorGeometry {
        OperatorGeometry {
            modality: "mri".into(),
            shape: vec![2, self.rows(), self.cols()],
            acceleration: self.acceleration,
            n_views: None,
            seed: self.seed,
        }
    }
}

//! Dense channel-first image buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `channels × rows × cols` field stored row-major in `f64`.
///
/// CT images carry one channel; MRI images carry two (real, imaginary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
        }
    }

    pub fn from_vec(channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * rows * cols {
            return Err(Error::shape(&[channels * rows * cols], &[data.len()]));
        }
        Ok(Self {
            channels,
            rows,
            cols,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.rows, self.cols]
    }

    pub fn plane_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.rows + r) * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        self.data[(c * self.rows + r) * self.cols + col] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_shape(&self, expected: [usize; 3]) -> Result<()> {
        if self.shape() != expected {
            return Err(Error::shape(&expected, &self.shape()));
        }
        Ok(())
    }

    /// Per-pixel magnitude across channels (`sqrt(Σ_c x_c²)`), as a one-channel image.
    pub fn magnitude(&self) -> Image {
        if self.channels == 1 {
            return Image::from_vec(1, self.rows, self.cols, self.data.iter().map(|v| v.abs()).collect())
                .expect("shape preserved");
        }
        let n = self.plane_len();
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v * v;
            }
        }
        out.iter_mut().for_each(|o| *o = o.sqrt());
        Image::from_vec(1, self.rows, self.cols, out).expect("shape preserved")
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            channels: self.channels,
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

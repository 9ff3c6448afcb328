//! Parallel-beam sparse-view CT: `A = C R`.

use super::{LinearOperator, OperatorGeometry};
use crate::error::{Error, Result};

/// `n_views` equispaced angles (degrees) from a fan of `n_full` angles over
/// `[0°, 180°)`, starting at 0°.
pub fn select_views(n_full: usize, n_views: usize) -> Result<Vec<f64>> {
    if n_views == 0 || n_full == 0 {
        return Err(Error::invalid("view counts must be positive"));
    }
    if n_views > n_full {
        return Err(Error::invalid(format!("{n_views} views requested from a {n_full}-angle fan")));
    }
    Ok((0..n_views)
        .map(|j| {
            let k = j * n_full / n_views;
            180.0 * k as f64 / n_full as f64
        })
        .collect())
}

/// Rotate-and-sum Radon transform restricted to a set of views.
///
/// For each angle the image is resampled on a rotated grid with bilinear
/// interpolation (zero outside the support) and summed down each column, so
/// detector bin `j` sits at signed offset `j - (cols - 1) / 2` from the
/// rotation centre. The adjoint scatters with the same weights and is the
/// exact transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct CtOperator {
    angles_deg: Vec<f64>,
    rows: usize,
    cols: usize,
    n_full: Option<usize>,
}

impl CtOperator {
    pub fn new(angles_deg: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if angles_deg.is_empty() {
            return Err(Error::invalid("at least one view is required"));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("image must be non-empty"));
        }
        if angles_deg.iter().any(|a| !(0.0..180.0).contains(a)) {
            return Err(Error::invalid("angles must lie in [0, 180)"));
        }
        if angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("angles must be strictly increasing"));
        }
        Ok(Self {
            angles_deg,
            rows,
            cols,
            n_full: None,
        })
    }

    /// Sparse-view operator taking `n_views` of an `n_full` fan.
    pub fn sparse_view(n_full: usize, n_views: usize, rows: usize, cols: usize) -> Result<Self> {
        let mut op = Self::new(select_views(n_full, n_views)?, rows, cols)?;
        op.n_full = Some(n_full);
        Ok(op)
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn n_detectors(&self) -> usize {
        self.cols
    }

    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    /// Visits every `(detector, pixel, weight)` triple of one view.
    #[inline]
    fn for_each_weight(&self, angle_deg: f64, mut f: impl FnMut(usize, usize, f64)) {
        let (rows, cols) = (self.rows, self.cols);
        let theta = angle_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let cy = (rows as f64 - 1.0) / 2.0;
        let cx = (cols as f64 - 1.0) / 2.0;
        for r in 0..rows {
            let v = r as f64 - cy;
            for j in 0..cols {
                let u = j as f64 - cx;
                let xs = cx + u * c - v * s;
                let ys = cy + u * s + v * c;
                let x0 = xs.floor();
                let y0 = ys.floor();
                let fx = xs - x0;
                let fy = ys - y0;
                let (x0, y0) = (x0 as isize, y0 as isize);
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    let yy = y0 + dy;
                    if wy == 0.0 || yy < 0 || yy >= rows as isize {
                        continue;
                    }
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        let xx = x0 + dx;
                        if wx == 0.0 || xx < 0 || xx >= cols as isize {
                            continue;
                        }
                        f(j, yy as usize * cols + xx as usize, wy * wx);
                    }
                }
            }
        }
    }

    pub fn radon_forward(&self, x: &crate::image::Image) -> Result<super::Measurements> {
        self.forward(x)
    }

    pub fn radon_adjoint(&self, s: &super::Measurements) -> Result<crate::image::Image> {
        self.adjoint(s)
    }
}

impl LinearOperator for CtOperator {
    fn image_shape(&self) -> [usize; 3] {
        [1, self.rows, self.cols]
    }

    fn measurement_shape(&self) -> Vec<usize> {
        vec![self.angles_deg.len(), self.cols]
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let nd = self.cols;
        for (a, &angle) in self.angles_deg.iter().enumerate() {
            let row = &mut out[a * nd..(a + 1) * nd];
            row.iter_mut().for_each(|v| *v = 0.0);
            self.for_each_weight(angle, |j, p, w| row[j] += w * x[p]);
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let nd = self.cols;
        for (a, &angle) in self.angles_deg.iter().enumerate() {
            let row = &y[a * nd..(a + 1) * nd];
            self.for_each_weight(angle, |j, p, w| out[p] += w * row[j]);
        }
    }

    fn geometry(&self) -> OperatorGeometry {
        OperatorGeometry {
            modality: "ct".into(),
            shape: vec![1, self.rows, self.cols],
            acceleration: None,
            n_views: Some(self.angles_deg.len()),
            seed: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::operators::{adjoint_test_operator, Measurements};

    #[test]
    fn view_selection() {
        let v = select_views(180, 18).unwrap();
        assert_eq!(v.len(), 18);
        for (j, a) in v.iter().enumerate() {
            assert!((a - 10.0 * j as f64).abs() < 1e-12);
        }
        let v = select_views(180, 30).unwrap();
        assert!(v.windows(2).all(|w| (w[1] - w[0] - 6.0).abs() < 1e-12));
        assert_eq!(select_views(180, 180).unwrap().len(), 180);
        assert!(select_views(180, 181).is_err());
    }

    #[test]
    fn full_fan_rows() {
        let op = CtOperator::sparse_view(180, 180, 16, 16).unwrap();
        let s = op.forward(&Image::zeros(1, 16, 16)).unwrap();
        assert_eq!(s.shape, vec![180, 16]);
        assert!(s.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_angle_is_column_sum() {
        let op = CtOperator::new(vec![0.0], 5, 4).unwrap();
        let x = Image::from_vec(1, 5, 4, (0..20).map(|v| v as f64).collect()).unwrap();
        let s = op.forward(&x).unwrap();
        for j in 0..4 {
            let col: f64 = (0..5).map(|r| x.get(0, r, j)).sum();
            assert!((s.data[j] - col).abs() < 1e-12);
        }
        let back = op
            .adjoint(&Measurements {
                shape: vec![1, 4],
                data: vec![1.0; 4],
            })
            .unwrap();
        assert!(back.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn transpose_pair() {
        let op = CtOperator::sparse_view(180, 18, 20, 20).unwrap();
        assert!(adjoint_test_operator(&op, 20, 8) < 1e-5);
        let zero = op.adjoint(&Measurements::zeros(op.measurement_shape())).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_angles() {
        assert!(CtOperator::new(vec![10.0, 5.0], 8, 8).is_err());
        assert!(CtOperator::new(vec![180.0], 8, 8).is_err());
        assert!(CtOperator::new(vec![], 8, 8).is_err());
    }
}

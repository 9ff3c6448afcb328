//! PSNR and SSIM.
//!
//! SSIM uses a uniform `w × w` window evaluated at every fully contained
//! position (no padding) with population statistics, and constants
//! `C1 = (k1 L)²`, `C2 = (k2 L)²` where `L` is the data range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Peak value; `None` uses the maximum of the reference.
    pub data_range: Option<f64>,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub psnr_cap_db: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            data_range: None,
            ssim_window: 7,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            psnr_cap_db: 100.0,
        }
    }
}

impl MetricConfig {
    pub fn with_range(data_range: f64) -> Self {
        Self {
            data_range: Some(data_range),
            ..Self::default()
        }
    }

    fn range_for(&self, reference: &Image) -> Result<f64> {
        let l = self.data_range.unwrap_or_else(|| reference.min_max().1);
        if !(l > 0.0) {
            return Err(Error::invalid("data range must be positive"));
        }
        Ok(l)
    }
}

pub fn psnr(x: &Image, reference: &Image, cfg: &MetricConfig) -> Result<f64> {
    if !x.same_shape(reference) {
        return Err(Error::shape(&reference.shape(), &x.shape()));
    }
    let l = cfg.range_for(reference)?;
    let mse = x
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(cfg.psnr_cap_db);
    }
    Ok((10.0 * (l * l / mse).log10()).min(cfg.psnr_cap_db))
}

/// Mean local SSIM, averaged over channels.
pub fn ssim(x: &Image, reference: &Image, cfg: &MetricConfig) -> Result<f64> {
    if !x.same_shape(reference) {
        return Err(Error::shape(&reference.shape(), &x.shape()));
    }
    let win = cfg.ssim_window;
    if win == 0 || win % 2 == 0 {
        return Err(Error::invalid("SSIM window must be odd"));
    }
    if x.rows < win || x.cols < win {
        return Err(Error::invalid(format!(
            "image {}x{} smaller than SSIM window {win}",
            x.rows, x.cols
        )));
    }
    let l = cfg.range_for(reference)?;
    let c1 = (cfg.ssim_k1 * l).powi(2);
    let c2 = (cfg.ssim_k2 * l).powi(2);
    let npix = (win * win) as f64;
    let (rows, cols) = (x.rows, x.cols);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..x.channels {
        let a = x.channel(c);
        let b = reference.channel(c);
        for r0 in 0..=rows - win {
            for k0 in 0..=cols - win {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + win {
                    let ra = &a[r * cols + k0..r * cols + k0 + win];
                    let rb = &b[r * cols + k0..r * cols + k0 + win];
                    for (&u, &v) in ra.iter().zip(rb) {
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let ma = sa / npix;
                let mb = sb / npix;
                let va = (saa / npix - ma * ma).max(0.0);
                let vb = (sbb / npix - mb * mb).max(0.0);
                let cov = sab / npix - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// PSNR and SSIM of an estimate against ground truth, on magnitudes for
/// multi-channel (complex) images, with the reference magnitude maximum as
/// data range unless configured otherwise.
pub fn evaluate(x: &Image, reference: &Image, cfg: &MetricConfig) -> Result<(f64, f64)> {
    let (xm, rm) = if reference.channels > 1 {
        (x.magnitude(), reference.magnitude())
    } else {
        (x.clone(), reference.clone())
    };
    let cfg = MetricConfig {
        data_range: Some(cfg.range_for(&rm)?),
        ..*cfg
    };
    Ok((psnr(&xm, &rm, &cfg)?, ssim(&xm, &rm, &cfg)?))
}

//! Channel-major batched activations and the primitive kernels the U-Net is
//! built from.
//!
//! Activations are stored as `C × B × H × W` so that a convolution over the
//! whole batch is a single `Cout × (C·k²)` by `(C·k²) × (B·H·W)` product.

use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            b,
            h,
            w,
            data: vec![0.0; c * b * h * w],
        }
    }

    /// Number of columns of the channel-major matrix view (`B·H·W`).
    #[inline]
    pub fn n(&self) -> usize {
        self.b * self.h * self.w
    }

    pub fn from_images(images: &[&Image]) -> Self {
        let first = images[0];
        let (c, h, w) = (first.channels, first.rows, first.cols);
        let hw = h * w;
        let b = images.len();
        let mut t = Tensor::zeros(c, b, h, w);
        for (bi, img) in images.iter().enumerate() {
            assert_eq!(img.shape(), [c, h, w], "batch images must share a shape");
            for ci in 0..c {
                t.data[(ci * b + bi) * hw..(ci * b + bi + 1) * hw].copy_from_slice(img.channel(ci));
            }
        }
        t
    }

    pub fn from_image(image: &Image) -> Self {
        Tensor {
            c: image.channels,
            b: 1,
            h: image.rows,
            w: image.cols,
            data: image.data.clone(),
        }
    }

    pub fn to_image(&self, bi: usize) -> Image {
        let hw = self.h * self.w;
        let mut img = Image::zeros(self.c, self.h, self.w);
        for ci in 0..self.c {
            let src = &self.data[(ci * self.b + bi) * hw..(ci * self.b + bi + 1) * hw];
            img.channel_mut(ci).copy_from_slice(src);
        }
        img
    }

    pub fn into_image(self) -> Image {
        assert_eq!(self.b, 1);
        Image {
            channels: self.c,
            rows: self.h,
            cols: self.w,
            data: self.data,
        }
    }

    /// Row `ci` of the channel-major matrix (all batch items and pixels).
    #[inline]
    pub fn channel_row(&self, ci: usize) -> &[f64] {
        let n = self.n();
        &self.data[ci * n..(ci + 1) * n]
    }

    /// Stacks two tensors along the channel axis.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!((a.b, a.h, a.w), (b.b, b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            c: a.c + b.c,
            b: a.b,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Splits off the first `c` channels.
    pub fn split(self, c: usize) -> (Tensor, Tensor) {
        let n = self.n();
        let mut data = self.data;
        let tail = data.split_off(c * n);
        (
            Tensor {
                c,
                b: self.b,
                h: self.h,
                w: self.w,
                data,
            },
            Tensor {
                c: self.c - c,
                b: self.b,
                h: self.h,
                w: self.w,
                data: tail,
            },
        )
    }
}

/// `k×k` same-padding patch matrix, `(C·k²) × (B·H·W)`.
pub(crate) fn im2col(x: &Tensor, k: usize, cols: &mut Vec<f64>) {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let n = x.n();
    let pad = (k / 2) as isize;
    cols.clear();
    cols.resize(x.c * k * k * n, 0.0);
    for ci in 0..x.c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx.max(0)) as usize;
                for bi in 0..x.b {
                    let src_plane = &x.data[(ci * x.b + bi) * hw..(ci * x.b + bi + 1) * hw];
                    let dst_plane = &mut dst_row[bi * hw..(bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let s0 = (x_lo as isize + dx) as usize;
                        dst_plane[y * w + x_lo..y * w + x_hi]
                            .copy_from_slice(&src_plane[sy * w + s0..sy * w + s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
pub(crate) fn col2im(dcols: &[f64], k: usize, dx: &mut Tensor) {
    let (h, w) = (dx.h, dx.w);
    let hw = h * w;
    let n = dx.n();
    let b = dx.b;
    let pad = (k / 2) as isize;
    dx.data.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..dx.c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dxo = kx as isize - pad;
                let row = (ci * k + ky) * k + kx;
                let src_row = &dcols[row * n..(row + 1) * n];
                let x_lo = (-dxo).max(0) as usize;
                let x_hi = (w as isize - dxo.max(0)) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for bi in 0..b {
                    let dst_plane = &mut dx.data[(ci * b + bi) * hw..(ci * b + bi + 1) * hw];
                    let src_plane = &src_row[bi * hw..(bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let s0 = (x_lo as isize + dxo) as usize;
                        let dst = &mut dst_plane[sy * w + s0..sy * w + s0 + (x_hi - x_lo)];
                        let src = &src_plane[y * w + x_lo..y * w + x_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of the given slices; callers
    // pass lengths consistent with m, k and n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn avg_pool2(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, x.b, h2, w2);
    let planes = x.c * x.b;
    for p in 0..planes {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut out.data[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let r0 = &src[2 * y * x.w..(2 * y + 1) * x.w];
            let r1 = &src[(2 * y + 1) * x.w..(2 * y + 2) * x.w];
            for xx in 0..w2 {
                dst[y * w2 + xx] = 0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.c, dy.b, h, w);
    let planes = dy.c * dy.b;
    for p in 0..planes {
        let src = &dy.data[p * dy.h * dy.w..(p + 1) * dy.h * dy.w];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * src[(y / 2) * dy.w + xx / 2];
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, x.b, h, w);
    let planes = x.c * x.b;
    for p in 0..planes {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut out.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, dy.b, h2, w2);
    let planes = dy.c * dy.b;
    for p in 0..planes {
        let src = &dy.data[p * dy.h * dy.w..(p + 1) * dy.h * dy.w];
        let dst = &mut dx.data[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w2 + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}

//! Convolution kernels: im2col + GEMM, forward and adjoint.
//!
//! Weights follow the usual layouts: `[C_out, C_in, K, K]` for convolution and
//! `[C_in, C_out, K, K]` for the transposed convolution.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry of a strided, zero-padded convolution reading an `h x w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `img` (`channels x h x w`) into `rows x cols` patches.
pub fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npos = oh * ow;
    debug_assert_eq!(cols.len(), g.rows() * npos);
    for ci in 0..g.channels {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // contiguous interior with zero margins
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(ow as isize)).max(lo as isize) as usize;
                        line[..lo].fill(T::zero());
                        line[lo..hi].copy_from_slice(
                            &src[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
                        );
                        line[hi..].fill(T::zero());
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: fold patches back, accumulating into `img`.
pub fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npos = oh * ow;
    for ci in 0..g.channels {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_out_shape(x: Shape, c_out: usize, k: usize, stride: usize, pad: usize) -> Shape {
    let g = ConvGeom {
        channels: x[1],
        h: x[2],
        w: x[3],
        k,
        stride,
        pad,
    };
    [x[0], c_out, g.out_h(), g.out_w()]
}

/// Direct convolution forward.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, _, k, _] = w.shape();
    let g = ConvGeom {
        channels: c_in,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let (rows, npos) = (g.rows(), g.cols());
    let mut out = Tensor::zeros([n, c_out, g.out_h(), g.out_w()]);
    let in_per = c_in * h * wd;
    let bias = b.data();
    out.data_mut()
        .par_chunks_mut(c_out * npos)
        .enumerate()
        .for_each(|(i, o)| {
            let img = &x.data()[i * in_per..(i + 1) * in_per];
            for (co, chunk) in o.chunks_mut(npos).enumerate() {
                chunk.fill(bias[co]);
            }
            if g.is_pointwise() {
                T::gemm(c_out, rows, npos, T::one(), w.data(), rows as isize, 1, img, npos as isize, 1, T::one(), o, npos as isize, 1);
            } else {
                let mut cols = vec![T::zero(); rows * npos];
                im2col(&g, img, &mut cols);
                T::gemm(c_out, rows, npos, T::one(), w.data(), rows as isize, 1, &cols, npos as isize, 1, T::one(), o, npos as isize, 1);
            }
        });
    out
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `dy`.
/// Returns `(dx, dw, db)`; `dx` is skipped when `want_dx` is false.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, _, k, _] = w.shape();
    let g = ConvGeom {
        channels: c_in,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let (rows, npos) = (g.rows(), g.cols());
    let in_per = c_in * h * wd;
    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = &x.data()[i * in_per..(i + 1) * in_per];
            let dyi = &dy.data()[i * c_out * npos..(i + 1) * c_out * npos];
            let cols_owned;
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                let mut c = vec![T::zero(); rows * npos];
                im2col(&g, img, &mut c);
                cols_owned = c;
                &cols_owned
            };
            let mut dw = vec![T::zero(); c_out * rows];
            // dw = dy * cols^T
            T::gemm(c_out, npos, rows, T::one(), dyi, npos as isize, 1, cols, 1, npos as isize, T::zero(), &mut dw, rows as isize, 1);
            let db: Vec<T> = dyi.chunks(npos).map(|c| c.iter().copied().sum()).collect();
            let mut dx = Vec::new();
            if want_dx {
                let mut dcols = vec![T::zero(); rows * npos];
                // dcols = w^T * dy
                T::gemm(rows, c_out, npos, T::one(), w.data(), 1, rows as isize, dyi, npos as isize, 1, T::zero(), &mut dcols, npos as isize, 1);
                if g.is_pointwise() {
                    dx = dcols;
                } else {
                    dx = vec![T::zero(); in_per];
                    col2im_add(&g, &dcols, &mut dx);
                }
            }
            (dx, dw, db)
        })
        .collect();
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, 1, 1, c_out]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    for (i, (dxi, dwi, dbi)) in per_item.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(dwi) {
            *a = *a + b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(dbi) {
            *a = *a + b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.data_mut()[i * in_per..(i + 1) * in_per].copy_from_slice(&dxi);
        }
    }
    (dx, dw, db)
}

/// Geometry of the convolution whose adjoint is the transposed convolution
/// producing an `oh x ow` image.
fn deconv_geom(c_out: usize, oh: usize, ow: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        channels: c_out,
        h: oh,
        w: ow,
        k,
        stride,
        pad,
    }
}

pub fn deconv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h - 1) * stride + k - 2 * pad, (w - 1) * stride + k - 2 * pad)
}

/// Transposed convolution forward; weight layout `[C_in, C_out, K, K]`.
pub fn deconv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, c_in, h, wd] = x.shape();
    let [_, c_out, k, _] = w.shape();
    let (oh, ow) = deconv_out_hw(h, wd, k, stride, pad);
    let g = deconv_geom(c_out, oh, ow, k, stride, pad);
    debug_assert_eq!((g.out_h(), g.out_w()), (h, wd));
    let (rows, npos) = (g.rows(), h * wd);
    let mut out = Tensor::zeros([n, c_out, oh, ow]);
    let in_per = c_in * npos;
    let bias = b.data();
    out.data_mut()
        .par_chunks_mut(c_out * oh * ow)
        .enumerate()
        .for_each(|(i, o)| {
            let xi = &x.data()[i * in_per..(i + 1) * in_per];
            let mut cols = vec![T::zero(); rows * npos];
            // cols = w^T * x, w viewed as [C_in, rows]
            T::gemm(rows, c_in, npos, T::one(), w.data(), 1, rows as isize, xi, npos as isize, 1, T::zero(), &mut cols, npos as isize, 1);
            for (co, chunk) in o.chunks_mut(oh * ow).enumerate() {
                chunk.fill(bias[co]);
            }
            col2im_add(&g, &cols, o);
        });
    out
}

pub fn deconv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c_in, h, wd] = x.shape();
    let [_, c_out, k, _] = w.shape();
    let (oh, ow) = deconv_out_hw(h, wd, k, stride, pad);
    let g = deconv_geom(c_out, oh, ow, k, stride, pad);
    let (rows, npos) = (g.rows(), h * wd);
    let in_per = c_in * npos;
    let out_per = c_out * oh * ow;
    let per_item: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x.data()[i * in_per..(i + 1) * in_per];
            let dyi = &dy.data()[i * out_per..(i + 1) * out_per];
            let mut dcols = vec![T::zero(); rows * npos];
            im2col(&g, dyi, &mut dcols);
            let mut dw = vec![T::zero(); c_in * rows];
            // dw = x * dcols^T
            T::gemm(c_in, npos, rows, T::one(), xi, npos as isize, 1, &dcols, 1, npos as isize, T::zero(), &mut dw, rows as isize, 1);
            let db: Vec<T> = dyi.chunks(oh * ow).map(|c| c.iter().copied().sum()).collect();
            let mut dx = Vec::new();
            if want_dx {
                dx = vec![T::zero(); in_per];
                T::gemm(c_in, rows, npos, T::one(), w.data(), rows as isize, 1, &dcols, npos as isize, 1, T::zero(), &mut dx, npos as isize, 1);
            }
            (dx, dw, db)
        })
        .collect();
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, 1, 1, c_out]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    for (i, (dxi, dwi, dbi)) in per_item.into_iter().enumerate() {
        for (a, b) in dw.data_mut().iter_mut().zip(dwi) {
            *a = *a + b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(dbi) {
            *a = *a + b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.data_mut()[i * in_per..(i + 1) * in_per].copy_from_slice(&dxi);
        }
    }
    (dx, dw, db)
}

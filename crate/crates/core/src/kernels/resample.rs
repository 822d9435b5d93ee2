//! Resampling kernels and their adjoints.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear taps of a clamped sample coordinate.
#[derive(Clone, Copy, Debug)]
struct Taps<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// Coordinate fell outside `[0, len-1]` and was clamped.
    clamped: bool,
}

#[inline]
fn clamp_taps<T: Scalar>(pos: T, len: usize) -> Taps<T> {
    let hi = T::lit((len - 1) as f64);
    let (p, clamped) = if pos < T::zero() {
        (T::zero(), true)
    } else if pos > hi {
        (hi, true)
    } else {
        (pos, false)
    };
    let i0 = p.floor().to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    Taps {
        i0,
        i1,
        frac: p - T::lit(i0 as f64),
        clamped,
    }
}

/// Backward warp: sample `src` at `(x + u, y + v)` with border clamping.
pub fn warp_forward<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = src.shape();
    let mut out = Tensor::zeros(src.shape());
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let tx = clamp_taps(T::lit(x as f64) + flow.at(ni, 0, y, x), w);
                let ty = clamp_taps(T::lit(y as f64) + flow.at(ni, 1, y, x), h);
                let (ax, ay) = (tx.frac, ty.frac);
                for ci in 0..c {
                    let i00 = src.at(ni, ci, ty.i0, tx.i0);
                    let i01 = src.at(ni, ci, ty.i0, tx.i1);
                    let i10 = src.at(ni, ci, ty.i1, tx.i0);
                    let i11 = src.at(ni, ci, ty.i1, tx.i1);
                    let one = T::one();
                    let v = (one - ay) * ((one - ax) * i00 + ax * i01) + ay * ((one - ax) * i10 + ax * i11);
                    out.set(ni, ci, y, x, v);
                }
            }
        }
    }
    out
}

/// Gradients of [`warp_forward`] w.r.t. source and flow.
pub fn warp_backward<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = src.shape();
    let mut dsrc = Tensor::zeros(src.shape());
    let mut dflow = Tensor::zeros(flow.shape());
    let one = T::one();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let tx = clamp_taps(T::lit(x as f64) + flow.at(ni, 0, y, x), w);
                let ty = clamp_taps(T::lit(y as f64) + flow.at(ni, 1, y, x), h);
                let (ax, ay) = (tx.frac, ty.frac);
                let (mut gu, mut gv) = (T::zero(), T::zero());
                for ci in 0..c {
                    let g = dy.at(ni, ci, y, x);
                    if g == T::zero() {
                        continue;
                    }
                    let i00 = src.at(ni, ci, ty.i0, tx.i0);
                    let i01 = src.at(ni, ci, ty.i0, tx.i1);
                    let i10 = src.at(ni, ci, ty.i1, tx.i0);
                    let i11 = src.at(ni, ci, ty.i1, tx.i1);
                    let d = dsrc.data_mut();
                    let idx = |yy: usize, xx: usize| ((ni * c + ci) * h + yy) * w + xx;
                    d[idx(ty.i0, tx.i0)] = d[idx(ty.i0, tx.i0)] + g * (one - ay) * (one - ax);
                    d[idx(ty.i0, tx.i1)] = d[idx(ty.i0, tx.i1)] + g * (one - ay) * ax;
                    d[idx(ty.i1, tx.i0)] = d[idx(ty.i1, tx.i0)] + g * ay * (one - ax);
                    d[idx(ty.i1, tx.i1)] = d[idx(ty.i1, tx.i1)] + g * ay * ax;
                    if tx.i1 != tx.i0 {
                        gu = gu + g * ((one - ay) * (i01 - i00) + ay * (i11 - i10));
                    }
                    if ty.i1 != ty.i0 {
                        gv = gv + g * ((one - ax) * (i10 - i00) + ax * (i11 - i01));
                    }
                }
                if !tx.clamped {
                    dflow.set(ni, 0, y, x, gu);
                }
                if !ty.clamped {
                    dflow.set(ni, 1, y, x, gv);
                }
            }
        }
    }
    (dsrc, dflow)
}

/// Per-axis half-pixel-centre bilinear weights (align-corners = false).
fn axis_weights<T: Scalar>(len_in: usize, len_out: usize) -> Vec<(usize, usize, T)> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

pub fn resize_bilinear_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let wy = axis_weights::<T>(h, oh);
    let wx = axis_weights::<T>(w, ow);
    let one = T::one();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut k = 0;
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            for &(y0, y1, ly) in &wy {
                for &(x0, x1, lx) in &wx {
                    let top = (one - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                    let bot = (one - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                    od[k] = (one - ly) * top + ly * bot;
                    k += 1;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (dy.h(), dy.w());
    let wy = axis_weights::<T>(h, oh);
    let wx = axis_weights::<T>(w, ow);
    let one = T::one();
    let mut dx = Tensor::zeros(in_shape);
    let mut k = 0;
    let dd = dx.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for &(y0, y1, ly) in &wy {
                for &(x0, x1, lx) in &wx {
                    let g = dy.data()[k];
                    k += 1;
                    let gt = g * (one - ly);
                    let gb = g * ly;
                    dd[base + y0 * w + x0] = dd[base + y0 * w + x0] + gt * (one - lx);
                    dd[base + y0 * w + x1] = dd[base + y0 * w + x1] + gt * lx;
                    dd[base + y1 * w + x0] = dd[base + y1 * w + x0] + gb * (one - lx);
                    dd[base + y1 * w + x1] = dd[base + y1 * w + x1] + gb * lx;
                }
            }
        }
    }
    dx
}

pub fn upsample_nearest_forward<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h * f, w * f], |[ni, ci, y, xx]| x.at(ni, ci, y / f, xx / f))
}

pub fn upsample_nearest_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor<T>, f: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let [n, c, oh, ow] = dy.shape();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let i = dx.index(ni, ci, y / f, x / f);
                    dx.data_mut()[i] = dx.data()[i] + dy.at(ni, ci, y, x);
                }
            }
        }
    }
    dx
}

/// Non-overlapping `f x f` mean pooling.
pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / f, w / f);
    let inv = T::lit(1.0 / (f * f) as f64);
    Tensor::from_fn([n, c, oh, ow], |[ni, ci, y, xx]| {
        let mut acc = T::zero();
        for dy in 0..f {
            for dx in 0..f {
                acc = acc + x.at(ni, ci, y * f + dy, xx * f + dx);
            }
        }
        acc * inv
    })
}

pub fn avg_pool_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor<T>, f: usize) -> Tensor<T> {
    let inv = T::lit(1.0 / (f * f) as f64);
    Tensor::from_fn(in_shape, |[ni, ci, y, x]| dy.at(ni, ci, y / f, x / f) * inv)
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[inline]
fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

/// 5-tap binomial blur with replicated borders, then keep every second pixel.
pub fn blur_down_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let k: Vec<T> = BINOMIAL5.iter().map(|&v| T::lit(v)).collect();
    Tensor::from_fn([n, c, h / 2, w / 2], |[ni, ci, y, xx]| {
        let mut acc = T::zero();
        for (i, &ky) in k.iter().enumerate() {
            let sy = clamp_index(2 * y as isize + i as isize - 2, h);
            for (j, &kx) in k.iter().enumerate() {
                let sx = clamp_index(2 * xx as isize + j as isize - 2, w);
                acc = acc + ky * kx * x.at(ni, ci, sy, sx);
            }
        }
        acc
    })
}

pub fn blur_down_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = in_shape;
    let k: Vec<T> = BINOMIAL5.iter().map(|&v| T::lit(v)).collect();
    let mut dx = Tensor::zeros(in_shape);
    let [n, c, oh, ow] = dy.shape();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let g = dy.at(ni, ci, y, xx);
                    for (i, &ky) in k.iter().enumerate() {
                        let sy = clamp_index(2 * y as isize + i as isize - 2, h);
                        for (j, &kx) in k.iter().enumerate() {
                            let sx = clamp_index(2 * xx as isize + j as isize - 2, w);
                            let idx = dx.index(ni, ci, sy, sx);
                            dx.data_mut()[idx] = dx.data()[idx] + g * ky * kx;
                        }
                    }
                }
            }
        }
    }
    dx
}

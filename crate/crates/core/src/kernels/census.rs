//! Soft census distance.
//!
//! Each pixel is described by the soft signs of its 8 neighbours relative to
//! the centre, `q = d / sqrt(0.81 + d^2)`. Two descriptors are compared with
//! the robust kernel `r(e) = e^2 / (0.1 + e^2)` and the per-pixel sums are
//! averaged over batch, channels and space. Out-of-bounds neighbours are
//! skipped.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SOFT_SIGN_EPS: f64 = 0.81;
pub const ROBUST_EPS: f64 = 0.1;

const OFFSETS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

#[inline]
fn soft_sign<T: Scalar>(d: T) -> T {
    d / (T::lit(SOFT_SIGN_EPS) + d * d).sqrt()
}

#[inline]
fn soft_sign_grad<T: Scalar>(d: T) -> T {
    let s = T::lit(SOFT_SIGN_EPS) + d * d;
    T::lit(SOFT_SIGN_EPS) / (s * s.sqrt())
}

#[inline]
fn robust<T: Scalar>(e: T) -> T {
    e * e / (T::lit(ROBUST_EPS) + e * e)
}

#[inline]
fn robust_grad<T: Scalar>(e: T) -> T {
    let s = T::lit(ROBUST_EPS) + e * e;
    T::lit(2.0 * ROBUST_EPS) * e / (s * s)
}

/// Visit every (pixel, in-bounds neighbour) pair: `f(centre_idx, neighbour_idx)`.
fn for_each_pair(shape: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = shape;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                for &(dy, dx) in &OFFSETS {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    f(base + y * w + x, base + ny as usize * w + nx as usize);
                }
            }
        }
    }
}

pub fn census_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    let (ad, bd) = (a.data(), b.data());
    let mut acc = T::zero();
    for_each_pair(a.shape(), |c, p| {
        let e = soft_sign(ad[p] - ad[c]) - soft_sign(bd[p] - bd[c]);
        acc = acc + robust(e);
    });
    acc / T::lit(a.len() as f64)
}

/// Gradients of [`census_forward`] scaled by the upstream scalar `g`.
pub fn census_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: T) -> (Tensor<T>, Tensor<T>) {
    let (ad, bd) = (a.data(), b.data());
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    let scale = g / T::lit(a.len() as f64);
    for_each_pair(a.shape(), |c, p| {
        let (dav, dbv) = (ad[p] - ad[c], bd[p] - bd[c]);
        let e = soft_sign(dav) - soft_sign(dbv);
        let r = scale * robust_grad(e);
        let ga = r * soft_sign_grad(dav);
        let gb = r * soft_sign_grad(dbv);
        da[p] = da[p] + ga;
        da[c] = da[c] - ga;
        db[p] = db[p] - gb;
        db[c] = db[c] + gb;
    });
    (
        Tensor::from_vec(a.shape(), da).expect("shape"),
        Tensor::from_vec(b.shape(), db).expect("shape"),
    )
}

//! Dense rank-4 `(N, C, H, W)` tensors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tensor extents as `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Row-major rank-4 array. The tape links tensors into a graph; the tensor
/// itself is plain data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(&shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::dim("Tensor::from_vec", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar stored as a `(1, 1, 1, 1)` tensor.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(&shape));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([ni, ci, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| T::lit(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::dim("Tensor::reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("Tensor::zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |m, v| if v > m { v } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion (e.g. `f32` checkpoint into an `f64` check).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(start + len <= c);
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            let base = (ni * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor {
            shape: [n, len, h, w],
            data,
        }
    }

    /// Batch item `i` as a `(1, C, H, W)` tensor.
    pub fn item_at(&self, i: usize) -> Self {
        let per = numel(&self.shape) / self.shape[0];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[i * per..(i + 1) * per].to_vec(),
        }
    }

    /// Stack `(1, C, H, W)` tensors (or any equal shapes) along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("Tensor::stack", "no items"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::dim("Tensor::stack", &first.shape, &t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Spatial crop `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.h() && x0 + w <= self.w());
        let [n, c, _, _] = self.shape;
        Tensor::from_fn([n, c, h, w], |[ni, ci, y, x]| self.at(ni, ci, y0 + y, x0 + x))
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.w();
        Tensor::from_fn(self.shape, |[ni, ci, y, x]| self.at(ni, ci, y, w - 1 - x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn slice_and_stack_are_consistent() {
        let t = Tensor::<f64>::from_fn([2, 3, 2, 2], |[n, c, y, x]| (n * 100 + c * 10 + y * 2 + x) as f64);
        let s = t.slice_channels(1, 2);
        assert_eq!(s.shape(), [2, 2, 2, 2]);
        assert_eq!(s.at(1, 0, 1, 1), 113.0);
        let st = Tensor::stack(&[t.item_at(0), t.item_at(1)]).unwrap();
        assert_eq!(st, t);
    }

    #[test]
    fn crop_and_flip() {
        let t = Tensor::<f32>::from_fn([1, 1, 3, 3], |[_, _, y, x]| (y * 3 + x) as f32);
        let c = t.crop(1, 1, 2, 2);
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        let f = t.flip_horizontal();
        assert_eq!(f.at(0, 0, 0, 0), 2.0);
    }
}

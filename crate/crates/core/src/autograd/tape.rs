//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough
//! information to run its adjoint. Nodes are appended in evaluation order, so
//! the tape is topologically sorted by construction and `backward` is one
//! reverse sweep.

use std::collections::HashMap;

use crate::autograd::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::kernels::{census, conv, resample};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Deconv { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Prelu { x: Var, slope: Var },
    Elu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Abs { x: Var },
    Clamp { x: Var, lo: T, hi: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x * mask` with a single-channel mask broadcast over channels.
    MulMask { x: Var, mask: Var },
    Scale { x: Var, k: T },
    AddScalar { x: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    MeanChannels { x: Var },
    SumPerItem { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Warp { src: Var, flow: Var },
    Resize { x: Var },
    UpNearest { x: Var, f: usize },
    AvgPool { x: Var, f: usize },
    BlurDown { x: Var },
    Census { a: Var, b: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            check_finite: false,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Fail any operation producing NaN or infinity from finite inputs.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.all_finite());
            if inputs_finite {
                return Err(Error::NonFinite { op });
            }
        }
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { kind } else { Op::Constant };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter; repeated calls return the same node so
    /// shared weights accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: if self.grad_enabled { Op::Param(id) } else { Op::Constant },
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, &sa, &sb));
        }
        Ok(())
    }

    fn unary(&mut self, op: &'static str, x: Var, kind: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value, kind, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws[1] != xs[1] || ws[2] != ws[3] || bs != [1, 1, 1, ws[0]] || xs[2] + 2 * pad < ws[2] {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        let value = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push("conv2d", value, Op::Conv { x, w, b, stride, pad }, &[x, w, b])
    }

    /// Transposed convolution; weight layout `[C_in, C_out, K, K]`.
    pub fn deconv(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws[0] != xs[1] || ws[2] != ws[3] || bs != [1, 1, 1, ws[1]] {
            return Err(Error::dim("deconv", &xs, &ws));
        }
        let value = conv::deconv_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push("deconv", value, Op::Deconv { x, w, b, stride, pad }, &[x, w, b])
    }

    /// Per-channel PReLU; `slope` has shape `[1, 1, 1, C]`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = self.shape(x);
        if self.shape(slope) != [1, 1, 1, xs[1]] {
            return Err(Error::dim("prelu", &xs, &self.shape(slope)));
        }
        let plane = xs[2] * xs[3];
        let s = self.value(slope).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            if *v < T::zero() {
                *v = *v * s[(i / plane) % xs[1]];
            }
        }
        self.push("prelu", value, Op::Prelu { x, slope }, &[x, slope])
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary("elu", x, Op::Elu { x }, |v| if v >= T::zero() { v } else { v.exp() - T::one() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid { x }, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp { x }, |v| v.exp())
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs { x }, |v| v.abs())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        self.unary("scale", x, Op::Scale { x, k }, |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar { x }, |v| v + k)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Multiply every channel of `x` by the single-channel `mask`.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x), self.shape(mask));
        if ms != [xs[0], 1, xs[2], xs[3]] {
            return Err(Error::dim("mul_mask", &xs, &ms));
        }
        let plane = xs[2] * xs[3];
        let m = self.value(mask).data();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            let n = i / (xs[1] * plane);
            *v = *v * m[n * plane + i % plane];
        }
        self.push("mul_mask", value, Op::MulMask { x, mask }, &[x, mask])
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::contract("concat", "no inputs"))?);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::dim("concat", &first, &s));
            }
            c_total += s[1];
        }
        let [n, _, h, w] = first;
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for ni in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.c() * plane;
                data.extend_from_slice(&t.data()[ni * per..(ni + 1) * per]);
            }
        }
        let value = Tensor::from_vec([n, c_total, h, w], data)?;
        self.push("concat", value, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x);
        if start + len > xs[1] || len == 0 {
            return Err(Error::dim("slice_channels", &xs, &[start, len]));
        }
        let value = self.value(x).slice_channels(start, len);
        self.push("slice_channels", value, Op::Slice { x, start }, &[x])
    }

    /// Mean over channels: `(N, C, H, W) -> (N, 1, H, W)`.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let t = self.value(x);
        let inv = T::lit(1.0 / c as f64);
        let value = Tensor::from_fn([n, 1, h, w], |[ni, _, y, xx]| {
            (0..c).map(|ci| t.at(ni, ci, y, xx)).sum::<T>() * inv
        });
        self.push("mean_channels", value, Op::MeanChannels { x }, &[x])
    }

    /// Sum of each batch item: `(N, C, H, W) -> (N, 1, 1, 1)`.
    pub fn sum_per_item(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let per = xs[1] * xs[2] * xs[3];
        let data = self.value(x).data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::from_vec([xs[0], 1, 1, 1], data)?;
        self.push("sum_per_item", value, Op::SumPerItem { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push("mean", value, Op::Mean { x }, &[x])
    }

    /// Bilinear backward warp of `src` by the `(N, 2, H, W)` flow.
    pub fn warp(&mut self, src: Var, flow: Var) -> Result<Var> {
        let (ss, fs) = (self.shape(src), self.shape(flow));
        if fs != [ss[0], 2, ss[2], ss[3]] {
            return Err(Error::dim("warp", &ss, &fs));
        }
        let value = resample::warp_forward(self.value(src), self.value(flow));
        self.push("warp", value, Op::Warp { src, flow }, &[src, flow])
    }

    /// Bilinear resize (half-pixel centres) to `oh x ow`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        if oh == 0 || ow == 0 {
            return Err(Error::contract("resize", format!("non-positive target extent {oh}x{ow}")));
        }
        let value = resample::resize_bilinear_forward(self.value(x), oh, ow);
        self.push("resize", value, Op::Resize { x }, &[x])
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        if f == 0 {
            return Err(Error::contract("upsample_nearest", "factor must be positive"));
        }
        let value = resample::upsample_nearest_forward(self.value(x), f);
        self.push("upsample_nearest", value, Op::UpNearest { x, f }, &[x])
    }

    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let xs = self.shape(x);
        if f == 0 || xs[2] % f != 0 || xs[3] % f != 0 {
            return Err(Error::contract(
                "avg_downsample",
                format!("extent {}x{} not divisible by {f}", xs[2], xs[3]),
            ));
        }
        let value = resample::avg_pool_forward(self.value(x), f);
        self.push("avg_pool", value, Op::AvgPool { x, f }, &[x])
    }

    /// Binomial blur followed by 2x decimation.
    pub fn blur_down(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::contract("blur_down", format!("odd extent {}x{}", xs[2], xs[3])));
        }
        let value = resample::blur_down_forward(self.value(x));
        self.push("blur_down", value, Op::BlurDown { x }, &[x])
    }

    /// Soft census distance (scalar).
    pub fn census(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("census_distance", a, b)?;
        let value = Tensor::scalar(census::census_forward(self.value(a), self.value(b)));
        self.push("census", value, Op::Census { a, b }, &[a, b])
    }

    /// Reverse sweep from the scalar `loss`, accumulating (`+=`) into the
    /// parameter gradients of `store`. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::contract("backward", "tape was recorded without gradients"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    store.get_mut(*id).grad.add_assign(&g);
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let want_dx = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) = conv::conv2d_backward(val(*x), val(*w), &g, *stride, *pad, want_dx);
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::Deconv { x, w, b, stride, pad } => {
                    let want_dx = self.nodes[x.0].needs_grad;
                    let (dx, dw, db) = conv::deconv_backward(val(*x), val(*w), &g, *stride, *pad, want_dx);
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::Prelu { x, slope } => {
                    let xv = val(*x);
                    let [_, c, h, w] = xv.shape();
                    let plane = h * w;
                    let s = val(*slope).data();
                    let mut dx = g.clone();
                    let mut ds = Tensor::zeros([1, 1, 1, c]);
                    for (i, d) in dx.data_mut().iter_mut().enumerate() {
                        let xi = xv.data()[i];
                        if xi < T::zero() {
                            let ci = (i / plane) % c;
                            ds.data_mut()[ci] = ds.data()[ci] + *d * xi;
                            *d = *d * s[ci];
                        }
                    }
                    acc(*x, dx);
                    acc(*slope, ds);
                }
                Op::Elu { x } => {
                    let d = g.zip_map(val(*x), |gi, xi| if xi >= T::zero() { gi } else { gi * xi.exp() })?;
                    acc(*x, d);
                }
                Op::Sigmoid { x } => {
                    let d = g.zip_map(&node.value, |gi, yi| gi * yi * (T::one() - yi))?;
                    acc(*x, d);
                }
                Op::Exp { x } => {
                    let d = g.zip_map(&node.value, |gi, yi| gi * yi)?;
                    acc(*x, d);
                }
                Op::Abs { x } => {
                    let d = g.zip_map(val(*x), |gi, xi| {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })?;
                    acc(*x, d);
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let d = g.zip_map(val(*x), |gi, xi| if xi < lo || xi > hi { T::zero() } else { gi })?;
                    acc(*x, d);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |p, q| p * q)?);
                    acc(*b, g.zip_map(val(*a), |p, q| p * q)?);
                }
                Op::MulMask { x, mask } => {
                    let xv = val(*x);
                    let mv = val(*mask);
                    let [n, c, h, w] = xv.shape();
                    let plane = h * w;
                    let mut dx = g.clone();
                    let mut dm = Tensor::zeros(mv.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                let gi = g.data()[base + p];
                                dx.data_mut()[base + p] = gi * mv.data()[ni * plane + p];
                                dm.data_mut()[ni * plane + p] = dm.data()[ni * plane + p] + gi * xv.data()[base + p];
                            }
                        }
                    }
                    acc(*x, dx);
                    acc(*mask, dm);
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    acc(*x, g.map(|v| v * k));
                }
                Op::AddScalar { x } => acc(*x, g),
                Op::Concat { parts } => {
                    let [n, _, h, w] = g.shape();
                    let plane = h * w;
                    let c_total = g.c();
                    let mut start = 0;
                    for &p in parts {
                        let cp = val(p).c();
                        let mut d = Vec::with_capacity(n * cp * plane);
                        for ni in 0..n {
                            let base = (ni * c_total + start) * plane;
                            d.extend_from_slice(&g.data()[base..base + cp * plane]);
                        }
                        acc(p, Tensor::from_vec([n, cp, h, w], d)?);
                        start += cp;
                    }
                }
                Op::Slice { x, start } => {
                    let xs = val(*x).shape();
                    let [n, len, h, w] = g.shape();
                    let plane = h * w;
                    let mut d = Tensor::zeros(xs);
                    for ni in 0..n {
                        let dst = (ni * xs[1] + start) * plane;
                        let src = ni * len * plane;
                        d.data_mut()[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                    }
                    acc(*x, d);
                }
                Op::MeanChannels { x } => {
                    let xs = val(*x).shape();
                    let inv = T::lit(1.0 / xs[1] as f64);
                    acc(*x, Tensor::from_fn(xs, |[ni, _, y, xx]| g.at(ni, 0, y, xx) * inv));
                }
                Op::SumPerItem { x } => {
                    let xs = val(*x).shape();
                    acc(*x, Tensor::from_fn(xs, |[ni, _, _, _]| g.data()[ni]));
                }
                Op::Sum { x } => {
                    let xs = val(*x).shape();
                    acc(*x, Tensor::full(xs, g.item()));
                }
                Op::Mean { x } => {
                    let xs = val(*x).shape();
                    let n = T::lit(val(*x).len() as f64);
                    acc(*x, Tensor::full(xs, g.item() / n));
                }
                Op::Warp { src, flow } => {
                    let (ds, df) = resample::warp_backward(val(*src), val(*flow), &g);
                    acc(*src, ds);
                    acc(*flow, df);
                }
                Op::Resize { x } => {
                    acc(*x, resample::resize_bilinear_backward(val(*x).shape(), &g));
                }
                Op::UpNearest { x, f } => {
                    acc(*x, resample::upsample_nearest_backward(val(*x).shape(), &g, *f));
                }
                Op::AvgPool { x, f } => {
                    acc(*x, resample::avg_pool_backward(val(*x).shape(), &g, *f));
                }
                Op::BlurDown { x } => {
                    acc(*x, resample::blur_down_backward(val(*x).shape(), &g));
                }
                Op::Census { a, b } => {
                    let (da, db) = census::census_backward(val(*a), val(*b), g.item());
                    acc(*a, da);
                    acc(*b, db);
                }
            }
        }
        self.clear();
        Ok(())
    }
}

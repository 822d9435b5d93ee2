//! Spatially pruned convolution.
//!
//! Training multiplies each gated convolution's output by the (soft) mask so
//! gradients reach every position. Inference gathers only the active
//! positions, convolves them, and scatters the results into a zeroed buffer.
//! Both paths hold skipped positions at zero, which makes them agree exactly
//! under a hard mask.

use std::fmt::Write as _;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Soft,
    Hard,
}

/// Spatial gate `P_j` at resolution `H / 2^j`, gating the block at level `j - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningMask<T> {
    pub scale_index: usize,
    pub data: Tensor<T>,
    pub mode: MaskMode,
}

impl<T: Scalar> PruningMask<T> {
    pub fn soft(scale_index: usize, data: Tensor<T>) -> Result<Self> {
        Self::validate(scale_index, &data)?;
        if data.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::contract("PruningMask::soft", "values outside [0, 1]"));
        }
        Ok(PruningMask {
            scale_index,
            data,
            mode: MaskMode::Soft,
        })
    }

    pub fn hard(scale_index: usize, data: Tensor<T>) -> Result<Self> {
        Self::validate(scale_index, &data)?;
        if data.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::contract("PruningMask::hard", "hard mask must contain only 0 and 1"));
        }
        Ok(PruningMask {
            scale_index,
            data,
            mode: MaskMode::Hard,
        })
    }

    fn validate(scale_index: usize, data: &Tensor<T>) -> Result<()> {
        if !(1..=3).contains(&scale_index) {
            return Err(Error::contract("PruningMask", format!("scale index {scale_index} not in 1..=3")));
        }
        if data.c() != 1 {
            return Err(Error::dim("PruningMask", &data.shape(), &[data.n(), 1, data.h(), data.w()]));
        }
        Ok(())
    }

    /// Fraction of active positions (mean mask value).
    pub fn density(&self) -> f64 {
        self.data.mean().as_f64()
    }
}

/// Active `(batch, y, x)` coordinates of a hard mask, sorted lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveIndex {
    pub coords: Vec<(usize, usize, usize)>,
}

impl ActiveIndex {
    pub fn count(&self) -> usize {
        self.coords.len()
    }

    /// Coordinates belonging to batch item `n` as `(y, x)`.
    pub fn item(&self, n: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let start = self.coords.partition_point(|c| c.0 < n);
        self.coords[start..]
            .iter()
            .take_while(move |c| c.0 == n)
            .map(|&(_, y, x)| (y, x))
    }
}

pub fn build_active_index<T: Scalar>(mask: &PruningMask<T>) -> Result<ActiveIndex> {
    if mask.mode != MaskMode::Hard {
        return Err(Error::contract("build_active_index", "soft mask given; harden it first"));
    }
    let [n, _, h, w] = mask.data.shape();
    let mut coords = Vec::new();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                if mask.data.at(ni, 0, y, x) == T::one() {
                    coords.push((ni, y, x));
                }
            }
        }
    }
    Ok(ActiveIndex { coords })
}

/// Per-layer multiply-accumulate accounting (one MAC = 2 FLOPs).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsRecord {
    pub layer: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub positions_dense: u64,
    pub positions_active: u64,
    pub gated: bool,
}

impl FlopsRecord {
    pub fn flops_per_position(&self) -> u64 {
        2 * (self.kernel * self.kernel * self.c_in * self.c_out) as u64
    }

    pub fn flops_dense(&self) -> u64 {
        self.flops_per_position() * self.positions_dense
    }

    pub fn flops_active(&self) -> u64 {
        self.flops_per_position() * self.positions_active
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsLedger {
    pub records: Vec<FlopsRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsSummary {
    pub total_dense: u64,
    pub total_active: u64,
    pub gated_dense: u64,
    pub gated_active: u64,
    pub ungated: u64,
    /// `100 * (1 - active / dense)` over the gated layers only.
    pub reduction_percent: f64,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a layer. `positions_dense` is the number of output positions
    /// (input positions for transposed convolutions) over the whole batch.
    pub fn record(
        &mut self,
        layer: impl Into<String>,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        positions_dense: u64,
        positions_active: u64,
        gated: bool,
    ) {
        debug_assert!(positions_active <= positions_dense);
        self.records.push(FlopsRecord {
            layer: layer.into(),
            kernel,
            c_in,
            c_out,
            positions_dense,
            positions_active,
            gated,
        });
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: FlopsLedger) {
        self.records.extend(other.records);
    }

    /// Plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<40} {:>2} {:>5} {:>5} {:>10} {:>10} {:>14} {:>14} {:>5}",
            "layer", "K", "C_in", "C_out", "pos_dense", "pos_active", "flops_dense", "flops_active", "gated"
        );
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:<40} {:>2} {:>5} {:>5} {:>10} {:>10} {:>14} {:>14} {:>5}",
                r.layer,
                r.kernel,
                r.c_in,
                r.c_out,
                r.positions_dense,
                r.positions_active,
                r.flops_dense(),
                r.flops_active(),
                if r.gated { "yes" } else { "no" }
            );
        }
        s
    }

    /// Machine-readable dump, one record per line:
    /// `layer=<name> K=<k> C_in=<c> C_out=<c> dense=<n> active=<n> gated=<0|1>`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "layer={} K={} C_in={} C_out={} dense={} active={} gated={}",
                r.layer, r.kernel, r.c_in, r.c_out, r.positions_dense, r.positions_active, r.gated as u8
            );
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut ledger = FlopsLedger::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let field = |key: &str| -> Result<&str> {
                line.split_whitespace()
                    .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                    .ok_or_else(|| Error::format("ledger", format!("line {}: missing {key}", ln + 1)))
            };
            let num = |key: &str| -> Result<u64> {
                field(key)?
                    .parse()
                    .map_err(|e| Error::format("ledger", format!("line {}: {key}: {e}", ln + 1)))
            };
            ledger.record(
                field("layer")?,
                num("K")? as usize,
                num("C_in")? as usize,
                num("C_out")? as usize,
                num("dense")?,
                num("active")?,
                num("gated")? != 0,
            );
        }
        Ok(ledger)
    }
}

pub fn flops_report(ledger: &FlopsLedger) -> Result<FlopsSummary> {
    if ledger.is_empty() {
        return Err(Error::contract("flops_report", "empty ledger"));
    }
    let (mut gd, mut ga, mut un) = (0u64, 0u64, 0u64);
    for r in &ledger.records {
        if r.gated {
            gd += r.flops_dense();
            ga += r.flops_active();
        } else {
            un += r.flops_dense();
        }
    }
    let reduction_percent = if gd == 0 {
        0.0
    } else {
        100.0 * (1.0 - ga as f64 / gd as f64)
    };
    Ok(FlopsSummary {
        total_dense: gd + un,
        total_active: ga + un,
        gated_dense: gd,
        gated_active: ga,
        ungated: un,
        reduction_percent,
    })
}

/// Training-time gated convolution: `conv2d(x, w, b) * mask`, broadcast over
/// channels and differentiable in both the convolution and the mask.
pub fn masked_conv_train<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    mask: Var,
) -> Result<Var> {
    let y = tape.conv2d(x, w, b, stride, pad)?;
    let (ys, ms) = (tape.shape(y), tape.shape(mask));
    if ms != [ys[0], 1, ys[2], ys[3]] {
        return Err(Error::dim("masked_conv_train", &ys, &ms));
    }
    tape.mul_mask(y, mask)
}

#[derive(Clone, Copy, Debug)]
pub enum Activation<'a, T> {
    Identity,
    /// Per-channel slopes, shape `[1, 1, 1, C_out]`.
    Prelu(&'a Tensor<T>),
}

/// One stride-1 convolution of a gated chain (3x3 with padding 1, or 1x1).
#[derive(Clone, Debug)]
pub struct SparseLayer<'a, T> {
    pub name: String,
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
    pub activation: Activation<'a, T>,
}

/// Gather/scatter execution of a chain of gated convolutions.
///
/// Every layer computes only at the active coordinates, reading a one-pixel
/// halo from the previous layer's zero-initialised dense buffer, and scatters
/// its activations back. Skipped positions stay zero in every layer output.
pub fn sparse_conv_infer<T: Scalar>(
    x: &Tensor<T>,
    layers: &[SparseLayer<'_, T>],
    mask: &PruningMask<T>,
    ledger: &mut FlopsLedger,
) -> Result<Tensor<T>> {
    if layers.is_empty() {
        return Err(Error::contract("sparse_conv_infer", "empty layer list"));
    }
    let [n, _, h, w] = x.shape();
    let ms = mask.data.shape();
    if ms != [n, 1, h, w] {
        return Err(Error::dim("sparse_conv_infer", &x.shape(), &ms));
    }
    let index = build_active_index(mask)?;
    let dense_pos = (n * h * w) as u64;
    let mut cur = x.clone();
    for layer in layers {
        let [c_out, c_in, k, _] = layer.weight.shape();
        if c_in != cur.c() || !(k == 1 || k == 3) {
            return Err(Error::dim("sparse_conv_infer", &cur.shape(), &layer.weight.shape()));
        }
        let geom = ConvGeom {
            channels: c_in,
            h,
            w,
            k,
            stride: 1,
            pad: k / 2,
        };
        let rows = geom.rows();
        let mut out = Tensor::zeros([n, c_out, h, w]);
        for ni in 0..n {
            let active: Vec<(usize, usize)> = index.item(ni).collect();
            let na = active.len();
            if na == 0 {
                continue;
            }
            let mut cols = vec![T::zero(); rows * na];
            let img = &cur.data()[ni * c_in * h * w..(ni + 1) * c_in * h * w];
            gather_patches(&geom, img, &active, &mut cols);
            let mut res = vec![T::zero(); c_out * na];
            for (co, chunk) in res.chunks_mut(na).enumerate() {
                chunk.fill(layer.bias.data()[co]);
            }
            T::gemm(
                c_out,
                rows,
                na,
                T::one(),
                layer.weight.data(),
                rows as isize,
                1,
                &cols,
                na as isize,
                1,
                T::one(),
                &mut res,
                na as isize,
                1,
            );
            for (co, chunk) in res.chunks(na).enumerate() {
                let slope = match layer.activation {
                    Activation::Identity => None,
                    Activation::Prelu(s) => Some(s.data()[co]),
                };
                let base = (ni * c_out + co) * h * w;
                for (&(y, xx), &v) in active.iter().zip(chunk) {
                    let v = match slope {
                        Some(s) if v < T::zero() => v * s,
                        _ => v,
                    };
                    out.data_mut()[base + y * w + xx] = v;
                }
            }
        }
        ledger.record(layer.name.clone(), k, c_in, c_out, dense_pos, index.count() as u64, true);
        cur = out;
    }
    Ok(cur)
}

/// im2col restricted to the listed output positions (stride 1, pad `k/2`).
fn gather_patches<T: Scalar>(g: &ConvGeom, img: &[T], active: &[(usize, usize)], cols: &mut [T]) {
    let na = active.len();
    let r = (g.k / 2) as isize;
    for ci in 0..g.channels {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * na..(row + 1) * na];
                for (d, &(y, x)) in dst.iter_mut().zip(active) {
                    let iy = y as isize + ky as isize - r;
                    let ix = x as isize + kx as isize - r;
                    *d = if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        T::zero()
                    } else {
                        plane[iy as usize * g.w + ix as usize]
                    };
                }
            }
        }
    }
}

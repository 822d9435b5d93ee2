//! Uncertainty estimation network and mask-label generation.
//!
//! The UEN shares the interpolation backbone (without mask heads) and adds
//! three uncertainty heads and two frame heads. `U_k` is a single-channel
//! log-variance field at input resolution.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvPrelu, Ctx, Deconv, Init};
use crate::scalar::Scalar;
use crate::sparse::FlopsLedger;
use crate::tensor::Tensor;
use crate::vfi::{Backbone, BackboneOut, ForwardOpts, NetConfig};

/// Skip percentages at the default target sparsity.
pub const DEFAULT_ALPHAS: [f64; 3] = [20.0, 40.0, 80.0];
pub const DEFAULT_TARGET_SPARSITY: f64 = 0.35;
pub const MAX_ALPHA: f64 = 95.0;

/// Alphas for another target sparsity: the 1:2:4 ratio is kept and the
/// scale follows `1 - S_t` (`(20, 40, 80)` at `S_t = 0.35`), capped at 95%.
pub fn alphas_for_sparsity(target: f64) -> [f64; 3] {
    let s = (1.0 - target) / (1.0 - DEFAULT_TARGET_SPARSITY);
    DEFAULT_ALPHAS.map(|a| (a * s).clamp(0.0, MAX_ALPHA))
}

/// Initial value of every `U_k`, about `ln(0.05)`: the optimum of the uncertainty
/// loss for a mean absolute residual of 0.1. Starting at 0 instead costs the
/// optimizer on the order of `3 / lr` steps just to shift the output level.
pub const U_INIT: f64 = -3.0;

/// Uncertainty head: `depth` 3x3 convolutions at full resolution, ELU
/// between them, linear output starting at the constant [`U_INIT`].
#[derive(Clone, Debug)]
pub struct UncertaintyHead {
    pub upsample: usize,
    pub convs: Vec<Conv>,
}

impl UncertaintyHead {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        hidden: usize,
        depth: usize,
        upsample: usize,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c = c_in;
        for i in 0..depth {
            let last = i + 1 == depth;
            let (out, init) = if last { (1, Init::Zero) } else { (hidden, Init::HeUniform) };
            let conv = Conv::new(store, rng, &format!("{name}.conv{i}"), c, out, 3, 1, init)?;
            if last {
                store.get_mut(conv.b).value = Tensor::full([1, 1, 1, 1], T::lit(U_INIT));
            }
            convs.push(conv);
            c = out;
        }
        Ok(UncertaintyHead { upsample, convs })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = cx.tape.upsample_nearest(x, self.upsample)?;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(cx, h)?;
            if i + 1 < self.convs.len() {
                h = cx.tape.elu(h)?;
            }
        }
        Ok(h)
    }
}

/// Frame head: `(3x3 conv + PReLU + deconv)` blocks, each doubling resolution;
/// the output passes through a sigmoid.
#[derive(Clone, Debug)]
pub struct FrameHead {
    pub blocks: Vec<(ConvPrelu, Deconv)>,
}

impl FrameHead {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        hidden: usize,
        blocks: usize,
    ) -> Result<Self> {
        let mut out = Vec::new();
        let mut c = c_in;
        for i in 0..blocks {
            let last = i + 1 == blocks;
            let conv = ConvPrelu::new(store, rng, &format!("{name}.b{i}.conv"), c, hidden, 3, 1)?;
            let co = if last { 3 } else { hidden };
            let de = Deconv::new(store, rng, &format!("{name}.b{i}.deconv"), hidden, co, Init::HeUniform)?;
            out.push((conv, de));
            c = co;
        }
        Ok(FrameHead { blocks: out })
    }

    fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, de) in &self.blocks {
            h = conv.forward(cx, h)?;
            h = de.forward(cx, h)?;
        }
        cx.tape.sigmoid(h)
    }
}

#[derive(Clone, Debug)]
pub struct Uen {
    pub backbone: Backbone,
    pub u_heads: [UncertaintyHead; 3],
    pub v_heads: [FrameHead; 2],
}

#[derive(Clone, Debug)]
pub struct UenOut {
    /// `I_t^k` for `k = 0, 1, 2`, all at input resolution.
    pub frames: [Var; 3],
    /// `U_k` for `k = 0, 1, 2`, shape `(N,1,H,W)`.
    pub uncertainty: [Var; 3],
    pub backbone: BackboneOut,
}

impl Uen {
    pub const PREFIX: &'static str = "uen";

    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: NetConfig) -> Result<Self> {
        let p = Self::PREFIX;
        let backbone = Backbone::new(store, rng, p, cfg, false)?;
        let w = cfg.widths();
        let hidden = (w[0] / 2).max(4);
        let u_heads = [
            UncertaintyHead::new(store, rng, &format!("{p}.u0"), w[0], hidden, 2, 2)?,
            UncertaintyHead::new(store, rng, &format!("{p}.u1"), w[1], hidden, 3, 2)?,
            UncertaintyHead::new(store, rng, &format!("{p}.u2"), w[2], hidden, 4, 4)?,
        ];
        let v_heads = [
            FrameHead::new(store, rng, &format!("{p}.v1"), w[1], w[1], 1)?,
            FrameHead::new(store, rng, &format!("{p}.v2"), w[2], w[2], 2)?,
        ];
        Ok(Uen {
            backbone,
            u_heads,
            v_heads,
        })
    }

    pub fn cfg(&self) -> NetConfig {
        self.backbone.cfg
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, i0: Var, i1: Var) -> Result<UenOut> {
        let b = self.backbone.forward(cx, i0, i1, &ForwardOpts::dense())?;
        // features[0] = phi_t^1 at H/2, features[1] = phi_t^2 at H/4.
        let frames = [
            b.frame,
            self.v_heads[0].forward(cx, b.features[0])?,
            self.v_heads[1].forward(cx, b.features[1])?,
        ];
        let uncertainty = [
            self.u_heads[0].forward(cx, b.block0_body)?,
            self.u_heads[1].forward(cx, b.features[0])?,
            self.u_heads[2].forward(cx, b.features[1])?,
        ];
        Ok(UenOut {
            frames,
            uncertainty,
            backbone: b,
        })
    }

    /// Uncertainty fields on a fresh inference tape.
    pub fn predict_uncertainty<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        i0: &Tensor<T>,
        i1: &Tensor<T>,
    ) -> Result<[Tensor<T>; 3]> {
        let mut tape = Tape::inference();
        let mut ledger = FlopsLedger::new();
        let out = {
            let mut cx = Ctx::new(&mut tape, store, &mut ledger);
            let a = cx.tape.constant(i0.clone());
            let b = cx.tape.constant(i1.clone());
            self.forward(&mut cx, a, b)?
        };
        Ok(out.uncertainty.map(|u| tape.take_value(u)))
    }
}

/// Sparse uncertainty loss averaged over levels:
/// `mean(exp(-U) * e + 2U)` with `e` the RGB-mean absolute residual.
pub fn loss_su<T: Scalar>(tape: &mut Tape<T>, frames: &[Var], gt: Var, u: &[Var]) -> Result<Var> {
    if frames.len() != u.len() || frames.is_empty() {
        return Err(Error::contract("loss_su", "one uncertainty field per predicted frame required"));
    }
    let gs = tape.shape(gt);
    let mut total: Option<Var> = None;
    for (&f, &uk) in frames.iter().zip(u) {
        let (fs, us) = (tape.shape(f), tape.shape(uk));
        if fs != gs {
            return Err(Error::dim("loss_su", &fs, &gs));
        }
        if us != [gs[0], 1, gs[2], gs[3]] {
            return Err(Error::dim("loss_su", &us, &[gs[0], 1, gs[2], gs[3]]));
        }
        let d = tape.sub(f, gt)?;
        let d = tape.abs(d)?;
        let e = tape.mean_channels(d)?;
        let nu = tape.scale(uk, -T::one())?;
        let w = tape.exp(nu)?;
        let a = tape.mul(w, e)?;
        let reg = tape.scale(uk, T::lit(2.0))?;
        let l = tape.add(a, reg)?;
        let l = tape.mean(l)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let t = total.expect("non-empty");
    tape.scale(t, T::lit(1.0 / frames.len() as f64))
}

/// Binary plane with its dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelPlane {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl LabelPlane {
    pub fn density(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec([1, 1, self.h, self.w], data).expect("plane shape")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 1 {
            return Err(Error::dim("LabelPlane", &t.shape(), &[1, 1, h, w]));
        }
        let mut bits = Vec::with_capacity(h * w);
        for &v in t.data() {
            if v == T::one() {
                bits.push(true);
            } else if v == T::zero() {
                bits.push(false);
            } else {
                return Err(Error::contract("LabelPlane", "labels must be binary"));
            }
        }
        Ok(LabelPlane { h, w, bits })
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            bits.extend_from_slice(&self.bits[y * self.w + x0..y * self.w + x0 + w]);
        }
        LabelPlane { h, w, bits }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut bits = self.bits.clone();
        for row in bits.chunks_mut(self.w) {
            row.reverse();
        }
        LabelPlane { h: self.h, w: self.w, bits }
    }
}

/// Labels `[P^0u, P^1u, P^2u]` for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskLabels {
    pub sample_id: u64,
    pub planes: [LabelPlane; 3],
}

/// Per-sample quantile threshold: `T = sorted(U)[floor(alpha/100 * H*W)]`,
/// label `= U > T`.
pub fn threshold_plane<T: Scalar>(u: &[T], h: usize, w: usize, alpha: f64) -> Result<LabelPlane> {
    if !(0.0..100.0).contains(&alpha) {
        return Err(Error::contract("gen_mask_labels", format!("alpha {alpha} outside [0, 100)")));
    }
    debug_assert_eq!(u.len(), h * w);
    let mut sorted = u.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let idx = ((alpha / 100.0 * (h * w) as f64).floor() as usize).min(h * w - 1);
    let t = sorted[idx];
    Ok(LabelPlane {
        h,
        w,
        bits: u.iter().map(|&v| v > t).collect(),
    })
}

/// Labels for every batch item of `u` (each `(N,1,H,W)`), thresholded per sample.
pub fn gen_mask_labels<T: Scalar>(u: &[Tensor<T>; 3], alphas: [f64; 3], sample_ids: &[u64]) -> Result<Vec<MaskLabels>> {
    let n = u[0].n();
    if sample_ids.len() != n || u.iter().any(|t| t.n() != n || t.c() != 1) {
        return Err(Error::contract("gen_mask_labels", "one single-channel field per sample required"));
    }
    for a in alphas {
        if !(0.0..100.0).contains(&a) {
            return Err(Error::contract("gen_mask_labels", format!("alpha {a} outside [0, 100)")));
        }
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let plane = |k: usize| {
                let t = &u[k];
                let (h, w) = (t.h(), t.w());
                threshold_plane(&t.data()[i * h * w..(i + 1) * h * w], h, w, alphas[k])
            };
            Ok(MaskLabels {
                sample_id: sample_ids[i],
                planes: [plane(0)?, plane(1)?, plane(2)?],
            })
        })
        .collect()
}

pub const LABEL_MAGIC: &[u8; 8] = b"UGSPLBL1";

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Write labels: magic, then per sample `id: u64` and three planes of
/// `(H: u32, W: u32, ceil(H*W/8) bytes)`, bits LSB-first in row-major order.
pub fn write_labels<W: Write>(mut w: W, labels: &[MaskLabels]) -> std::io::Result<()> {
    w.write_all(LABEL_MAGIC)?;
    for l in labels {
        w.write_all(&l.sample_id.to_le_bytes())?;
        for p in &l.planes {
            w.write_all(&(p.h as u32).to_le_bytes())?;
            w.write_all(&(p.w as u32).to_le_bytes())?;
            w.write_all(&pack_bits(&p.bits))?;
        }
    }
    w.flush()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("label cache", format!("truncated at byte {}", self.pos)));
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Read a label stream to its end; a truncated record is an error.
pub fn read_labels<R: Read>(mut r: R) -> Result<Vec<MaskLabels>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::format("label cache", e.to_string()))?;
    if buf.len() < 8 || &buf[..8] != LABEL_MAGIC {
        return Err(Error::format("label cache", "bad magic or version"));
    }
    let mut cur = Cursor { buf: &buf, pos: 8 };
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let id = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let mut plane = || -> Result<LabelPlane> {
            let (h, w) = (cur.u32()?, cur.u32()?);
            let bytes = cur.take((h * w).div_ceil(8))?;
            let bits = (0..h * w).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
            Ok(LabelPlane { h, w, bits })
        };
        let planes = [plane()?, plane()?, plane()?];
        out.push(MaskLabels { sample_id: id, planes });
    }
    Ok(out)
}

pub fn save_labels(path: &Path, labels: &[MaskLabels]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_labels(BufWriter::new(f), labels).map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<Vec<MaskLabels>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels(BufReader::new(f))
}

//! Coarse-to-fine interpolation network with uncertainty-guided spatial pruning.
//!
//! Pipeline: shared encoder, dense block at `H/16`, gated blocks at levels
//! 2 and 1, gated block 0 with a transposed-convolution head, then blending.
//! Mask `P_j` (resolution `H/2^j`) is produced at level `j` and gates the
//! block at level `j - 1`.
//!
//! Flow tensors carry four channels: `(u, v)` of `F_{t->0}` then of `F_{t->1}`.

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvPrelu, Ctx, Deconv, GatedChain, Init, Prelu};
use crate::scalar::Scalar;
use crate::sparse::{FlopsLedger, PruningMask};
use crate::tensor::Tensor;
use crate::vision::{bilinear_resize, gumbel_softmax, resize_flow, Ratio};

/// Encoder widths at width multiplier 1.
pub const ENCODER_WIDTHS: [usize; 4] = [32, 48, 72, 96];
pub const DEFAULT_SPARSE_CONVS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub width_mult: f64,
    /// Number of 3x3 convolutions in each gated block body.
    pub sparse_convs: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width_mult: 1.0,
            sparse_convs: DEFAULT_SPARSE_CONVS,
        }
    }
}

impl NetConfig {
    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_mult).round() as usize).max(4)
    }

    /// Encoder and intermediate-feature widths per level.
    pub fn widths(&self) -> [usize; 4] {
        ENCODER_WIDTHS.map(|c| self.scaled(c))
    }

    /// Internal width of the gated block bodies at levels 0, 1, 2.
    pub fn body_widths(&self) -> [usize; 3] {
        let w = self.widths();
        [2 * w[0], 2 * w[1], 2 * w[2]]
    }

    /// Width of the six convolutions of the dense block at level 3.
    pub fn block3_width(&self) -> usize {
        2 * self.widths()[3]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) || self.sparse_convs == 0 {
            return Err(Error::Config(format!(
                "invalid network config: width_mult={} sparse_convs={}",
                self.width_mult, self.sparse_convs
            )));
        }
        Ok(())
    }
}

pub fn check_input_extent(op: &'static str, shape: [usize; 4]) -> Result<()> {
    if shape[1] != 3 || shape[2] == 0 || shape[3] == 0 || shape[2] % 16 != 0 || shape[3] % 16 != 0 {
        return Err(Error::contract(
            op,
            format!("frames must be (N,3,H,W) with H, W positive multiples of 16; got {shape:?}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub levels: Vec<(ConvPrelu, ConvPrelu)>,
}

impl Encoder {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, p: &str, cfg: &NetConfig) -> Result<Self> {
        let mut c_in = 3;
        let mut levels = Vec::new();
        for (l, &c) in cfg.widths().iter().enumerate() {
            let a = ConvPrelu::new(store, rng, &format!("{p}.enc.l{l}.conv0"), c_in, c, 3, 2)?;
            let b = ConvPrelu::new(store, rng, &format!("{p}.enc.l{l}.conv1"), c, c, 3, 1)?;
            levels.push((a, b));
            c_in = c;
        }
        Ok(Encoder { levels })
    }

    /// Features at `H/2, H/4, H/8, H/16`.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, img: Var) -> Result<[Var; 4]> {
        let mut h = img;
        let mut out = Vec::with_capacity(4);
        for (a, b) in &self.levels {
            h = a.forward(cx, h)?;
            h = b.forward(cx, h)?;
            out.push(h);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// Spatial gate applied to a block body.
#[derive(Clone, Debug)]
pub enum Gate<T> {
    Dense,
    /// Multiply every layer output by this `(N,1,h,w)` mask.
    Mask(Var),
    /// Gather/scatter execution under a hard mask.
    Sparse(PruningMask<T>),
}

impl<T: Scalar> Gate<T> {
    fn run(&self, body: &GatedChain, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Gate::Dense => body.forward_masked(cx, x, None),
            Gate::Mask(m) => body.forward_masked(cx, x, Some(*m)),
            Gate::Sparse(m) => body.forward_sparse(cx, x, m),
        }
    }
}

fn gated_body<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    c_in: usize,
    width: usize,
    convs: usize,
    c_out: usize,
) -> Result<GatedChain> {
    let mut layers = Vec::new();
    let mut c = c_in;
    for i in 0..convs {
        let lname = format!("{name}.conv{i}");
        let conv = Conv::new(store, rng, &lname, c, width, 3, 1, Init::HeUniform)?;
        let act = Prelu::new(store, &lname, width)?;
        layers.push((conv, Some(act)));
        c = width;
    }
    let fuse = Conv::new(store, rng, &format!("{name}.fuse"), c, c_out, 1, 1, Init::HeUniform)?;
    layers.push((fuse, None));
    Ok(GatedChain { layers })
}

/// Coarse state handed to the next finer block, at that block's resolution.
#[derive(Clone, Copy, Debug)]
pub struct ScaleState {
    pub flow: Var,
    pub feature: Var,
    /// Mask logits `(N,2,h,w)` for the next block; absent without mask heads.
    pub mask_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ConvBlock3 {
    pub convs: Vec<ConvPrelu>,
    pub fuse: Conv,
    pub mask_head: Option<Conv>,
    pub feat: usize,
}

impl ConvBlock3 {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        p: &str,
        cfg: &NetConfig,
        mask_head: bool,
    ) -> Result<Self> {
        let (c3, d) = (cfg.widths()[3], cfg.block3_width());
        let mut convs = Vec::new();
        let mut c = 2 * c3;
        for i in 0..6 {
            convs.push(ConvPrelu::new(store, rng, &format!("{p}.block3.conv{i}"), c, d, 3, 1)?);
            c = d;
        }
        let fuse = Conv::new(store, rng, &format!("{p}.block3.fuse"), 6 * d, 4 + c3, 1, 1, Init::HeUniform)?;
        fuse.zero_outputs(store, 0..4);
        let mask_head = if mask_head {
            Some(Conv::new(store, rng, &format!("{p}.block3.mask"), c3, 2, 3, 1, Init::Zero)?)
        } else {
            None
        };
        Ok(ConvBlock3 {
            convs,
            fuse,
            mask_head,
            feat: c3,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, f0: Var, f1: Var) -> Result<ScaleState> {
        let mut h = cx.tape.concat(&[f0, f1])?;
        let mut outs = Vec::with_capacity(6);
        for c in &self.convs {
            h = c.forward(cx, h)?;
            outs.push(h);
        }
        let cat = cx.tape.concat(&outs)?;
        let y = self.fuse.forward(cx, cat)?;
        let flow = cx.tape.slice_channels(y, 0, 4)?;
        let feat = cx.tape.slice_channels(y, 4, self.feat)?;
        let mask_logits = match &self.mask_head {
            Some(m) => {
                let l = m.forward(cx, feat)?;
                Some(bilinear_resize(cx.tape, l, Ratio::up(2))?)
            }
            None => None,
        };
        Ok(ScaleState {
            flow: resize_flow(cx.tape, flow, Ratio::up(2))?,
            feature: bilinear_resize(cx.tape, feat, Ratio::up(2))?,
            mask_logits,
        })
    }
}

/// Warp both frames' features by the incoming flow and stack the block input.
fn block_input<T: Scalar>(cx: &mut Ctx<'_, T>, f0: Var, f1: Var, state: &ScaleState) -> Result<Var> {
    let fl0 = cx.tape.slice_channels(state.flow, 0, 2)?;
    let fl1 = cx.tape.slice_channels(state.flow, 2, 2)?;
    let w0 = cx.tape.warp(f0, fl0)?;
    let w1 = cx.tape.warp(f1, fl1)?;
    cx.tape.concat(&[state.feature, w0, w1, state.flow])
}

/// Gated refinement block at level 2 or 1.
#[derive(Clone, Debug)]
pub struct SparseBlock {
    pub level: usize,
    pub body: GatedChain,
    pub mask_head: Option<Conv>,
    pub feat: usize,
}

impl SparseBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        p: &str,
        cfg: &NetConfig,
        level: usize,
        mask_head: bool,
    ) -> Result<Self> {
        let w = cfg.widths();
        let c_in = w[level + 1] + 2 * w[level] + 4;
        let name = format!("{p}.block{level}");
        let body = gated_body(store, rng, &name, c_in, cfg.body_widths()[level], cfg.sparse_convs, 4 + w[level])?;
        body.layers.last().expect("fuse layer").0.zero_outputs(store, 0..4);
        let mask_head = if mask_head {
            Some(Conv::new(store, rng, &format!("{name}.mask"), w[level], 2, 3, 1, Init::Zero)?)
        } else {
            None
        };
        Ok(SparseBlock {
            level,
            body,
            mask_head,
            feat: w[level],
        })
    }

    /// Returns the state for level `level - 1` and this level's feature.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        f0: Var,
        f1: Var,
        state: &ScaleState,
        gate: &Gate<T>,
    ) -> Result<ScaleState> {
        let x = block_input(cx, f0, f1, state)?;
        let y = gate.run(&self.body, cx, x)?;
        let delta = cx.tape.slice_channels(y, 0, 4)?;
        let feat = cx.tape.slice_channels(y, 4, self.feat)?;
        let flow = cx.tape.add(state.flow, delta)?;
        let mask_logits = match &self.mask_head {
            Some(m) => {
                let l = m.forward(cx, feat)?;
                Some(bilinear_resize(cx.tape, l, Ratio::up(2))?)
            }
            None => None,
        };
        Ok(ScaleState {
            flow: resize_flow(cx.tape, flow, Ratio::up(2))?,
            feature: bilinear_resize(cx.tape, feat, Ratio::up(2))?,
            mask_logits,
        })
    }
}

/// Gated block at level 0 with a transposed-convolution head producing
/// full-resolution flow, blend logit and residual.
#[derive(Clone, Debug)]
pub struct SparseBlock0 {
    pub body: GatedChain,
    pub head: Deconv,
}

#[derive(Clone, Copy, Debug)]
pub struct Block0Out {
    pub flow: Var,
    pub blend_logit: Var,
    pub residual: Var,
    /// Gated body output at `H/2`.
    pub body: Var,
}

impl SparseBlock0 {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, p: &str, cfg: &NetConfig) -> Result<Self> {
        let w = cfg.widths();
        let c_in = w[1] + 2 * w[0] + 4;
        let name = format!("{p}.block0");
        let body = gated_body(store, rng, &name, c_in, cfg.body_widths()[0], cfg.sparse_convs, w[0])?;
        let head = Deconv::new(store, rng, &format!("{name}.head"), w[0], 8, Init::Zero)?;
        Ok(SparseBlock0 { body, head })
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        f0: Var,
        f1: Var,
        state: &ScaleState,
        gate: &Gate<T>,
    ) -> Result<Block0Out> {
        let x = block_input(cx, f0, f1, state)?;
        let body = gate.run(&self.body, cx, x)?;
        let y = self.head.forward(cx, body)?;
        let up = resize_flow(cx.tape, state.flow, Ratio::up(2))?;
        let df = cx.tape.slice_channels(y, 0, 4)?;
        Ok(Block0Out {
            flow: cx.tape.add(up, df)?,
            blend_logit: cx.tape.slice_channels(y, 4, 1)?,
            residual: cx.tape.slice_channels(y, 5, 3)?,
            body,
        })
    }
}

/// `clamp(M * warp(I0, F_t0) + (1 - M) * warp(I1, F_t1) + R, 0, 1)` with `M = sigmoid(logit)`.
pub fn synthesize<T: Scalar>(
    tape: &mut Tape<T>,
    i0: Var,
    i1: Var,
    flow: Var,
    blend_logit: Var,
    residual: Var,
) -> Result<(Var, Var)> {
    let fl0 = tape.slice_channels(flow, 0, 2)?;
    let fl1 = tape.slice_channels(flow, 2, 2)?;
    let w0 = tape.warp(i0, fl0)?;
    let w1 = tape.warp(i1, fl1)?;
    let m = tape.sigmoid(blend_logit)?;
    let neg = tape.scale(m, -T::one())?;
    let inv = tape.add_scalar(neg, T::one())?;
    let a = tape.mul_mask(w0, m)?;
    let b = tape.mul_mask(w1, inv)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, residual)?;
    Ok((tape.clamp(s, T::zero(), T::one())?, m))
}

/// Which execution the pruned branch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    /// Soft Gumbel masks multiplied into dense convolutions.
    Train,
    /// Hardened masks and gather/scatter convolution.
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Pruned,
    /// Auxiliary non-pruned branch: no gating, same parameters.
    Dense,
}

/// Mask source for the pruned branch.
#[derive(Clone, Debug)]
pub enum MaskSource<T> {
    /// Sample from the mask heads (soft with noise under `Train`, hard under `Infer`).
    Learned,
    /// Use fixed `[P1, P2, P3]` in place of the mask heads' output.
    Given([Tensor<T>; 3]),
}

#[derive(Clone, Debug)]
pub struct ForwardOpts<T> {
    pub branch: Branch,
    pub exec: Exec,
    pub tau: f64,
    /// Base seed for Gumbel noise; `None` samples without noise.
    pub noise_seed: Option<u64>,
    pub masks: MaskSource<T>,
}

impl<T> ForwardOpts<T> {
    pub fn dense() -> Self {
        ForwardOpts {
            branch: Branch::Dense,
            exec: Exec::Infer,
            tau: 1.0,
            noise_seed: None,
            masks: MaskSource::Learned,
        }
    }

    pub fn pruned(exec: Exec, tau: f64, noise_seed: Option<u64>) -> Self {
        ForwardOpts {
            branch: Branch::Pruned,
            exec,
            tau,
            noise_seed,
            masks: MaskSource::Learned,
        }
    }

    pub fn with_masks(mut self, masks: [Tensor<T>; 3]) -> Self {
        self.masks = MaskSource::Given(masks);
        self
    }
}

/// Shared encoder-decoder used by both the interpolation network and the UEN.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: NetConfig,
    pub encoder: Encoder,
    pub block3: ConvBlock3,
    pub block2: SparseBlock,
    pub block1: SparseBlock,
    pub block0: SparseBlock0,
}

#[derive(Clone, Debug)]
pub struct BackboneOut {
    pub frame: Var,
    pub flow: Var,
    pub blend: Var,
    pub residual: Var,
    /// `[P1, P2, P3]` at `H/2, H/4, H/8`; absent in the dense branch.
    pub masks: Option<[Var; 3]>,
    /// Intermediate features `[phi_t^1, phi_t^2, phi_t^3]` at `H/2, H/4, H/8`.
    pub features: [Var; 3],
    pub block0_body: Var,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: NetConfig,
        mask_heads: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone {
            cfg,
            encoder: Encoder::new(store, rng, prefix, &cfg)?,
            block3: ConvBlock3::new(store, rng, prefix, &cfg, mask_heads)?,
            block2: SparseBlock::new(store, rng, prefix, &cfg, 2, mask_heads)?,
            block1: SparseBlock::new(store, rng, prefix, &cfg, 1, mask_heads)?,
            block0: SparseBlock0::new(store, rng, prefix, &cfg)?,
        })
    }

    pub fn has_mask_heads(&self) -> bool {
        self.block3.mask_head.is_some()
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, i0: Var, i1: Var, opts: &ForwardOpts<T>) -> Result<BackboneOut> {
        let (s0, s1) = (cx.tape.shape(i0), cx.tape.shape(i1));
        check_input_extent("forward", s0)?;
        if s0 != s1 {
            return Err(Error::dim("forward", &s0, &s1));
        }
        let pruned = opts.branch == Branch::Pruned;
        if pruned && !self.has_mask_heads() && matches!(opts.masks, MaskSource::Learned) {
            return Err(Error::contract("forward", "pruned branch requires mask heads or given masks"));
        }
        let p0 = self.encoder.forward(cx, i0)?;
        let p1 = self.encoder.forward(cx, i1)?;

        let st3 = self.block3.forward(cx, p0[3], p1[3])?;
        let g3 = self.gate(cx, opts, &st3, 3)?;
        let st2 = self.block2.forward(cx, p0[2], p1[2], &st3, &g3.0)?;
        let g2 = self.gate(cx, opts, &st2, 2)?;
        let st1 = self.block1.forward(cx, p0[1], p1[1], &st2, &g2.0)?;
        let g1 = self.gate(cx, opts, &st1, 1)?;
        let b0 = self.block0.forward(cx, p0[0], p1[0], &st1, &g1.0)?;
        let (frame, blend) = synthesize(cx.tape, i0, i1, b0.flow, b0.blend_logit, b0.residual)?;
        let masks = match (g1.1, g2.1, g3.1) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            _ => None,
        };
        Ok(BackboneOut {
            frame,
            flow: b0.flow,
            blend,
            residual: b0.residual,
            masks,
            features: [st1.feature, st2.feature, st3.feature],
            block0_body: b0.body,
        })
    }

    /// Gate for the block consuming `state`, plus the mask variable `P_j`.
    fn gate<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        opts: &ForwardOpts<T>,
        state: &ScaleState,
        j: usize,
    ) -> Result<(Gate<T>, Option<Var>)> {
        if opts.branch == Branch::Dense {
            return Ok((Gate::Dense, None));
        }
        let [n, _, h, w] = cx.tape.shape(state.feature);
        let m = match &opts.masks {
            MaskSource::Given(ms) => {
                let t = &ms[j - 1];
                if t.shape() != [n, 1, h, w] {
                    return Err(Error::dim("forward: given mask", &[n, 1, h, w], &t.shape()));
                }
                cx.tape.constant(t.clone())
            }
            MaskSource::Learned => {
                let logits = state
                    .mask_logits
                    .ok_or_else(|| Error::contract("forward", "missing mask in pruned mode"))?;
                let hard = opts.exec == Exec::Infer;
                let seed = opts.noise_seed.map(|s| mix_seed(s, j as u64));
                gumbel_softmax(cx.tape, logits, T::lit(opts.tau), seed, hard)?
            }
        };
        let gate = match opts.exec {
            Exec::Train => Gate::Mask(m),
            Exec::Infer => Gate::Sparse(PruningMask::hard(j, cx.tape.value(m).clone())?),
        };
        Ok((gate, Some(m)))
    }
}

/// SplitMix64 finaliser over `(seed, salt)`.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The interpolation network with learned pruning masks.
#[derive(Clone, Debug)]
pub struct VfiNet {
    pub backbone: Backbone,
}

/// Values of one forward pass, detached from the tape.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub frame: Tensor<T>,
    pub masks: Option<[Tensor<T>; 3]>,
    pub ledger: FlopsLedger,
}

impl VfiNet {
    pub const PREFIX: &'static str = "vfi";

    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: NetConfig) -> Result<Self> {
        Ok(VfiNet {
            backbone: Backbone::new(store, rng, Self::PREFIX, cfg, true)?,
        })
    }

    pub fn cfg(&self) -> NetConfig {
        self.backbone.cfg
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, i0: Var, i1: Var, opts: &ForwardOpts<T>) -> Result<BackboneOut> {
        self.backbone.forward(cx, i0, i1, opts)
    }

    /// Run one forward pass on a fresh inference tape.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        i0: &Tensor<T>,
        i1: &Tensor<T>,
        opts: &ForwardOpts<T>,
    ) -> Result<Prediction<T>> {
        let mut tape = Tape::inference();
        let mut ledger = FlopsLedger::new();
        let out = {
            let mut cx = Ctx::new(&mut tape, store, &mut ledger);
            let a = cx.tape.constant(i0.clone());
            let b = cx.tape.constant(i1.clone());
            self.forward(&mut cx, a, b, opts)?
        };
        Ok(Prediction {
            frame: tape.take_value(out.frame),
            masks: out.masks.map(|m| m.map(|v| tape.take_value(v))),
            ledger,
        })
    }
}

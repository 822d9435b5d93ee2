//! Parameterised layers over the tape.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamStore`] so that
//! several forward passes (the pruned and the dense branch) read one copy.

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::sparse::{Activation, FlopsLedger, SparseLayer};
use crate::tensor::Tensor;

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform,
    Zero,
}

/// Mutable context shared by the layers of one forward pass.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub ledger: &'a mut FlopsLedger,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, ledger: &'a mut FlopsLedger) -> Self {
        Ctx { tape, store, ledger }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -a, a, rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let shape = [c_out, c_in, k, k];
        let wv = match init {
            Init::HeUniform => he_uniform(shape, c_in * k * k, rng),
            Init::Zero => Tensor::zeros(shape),
        };
        Ok(Conv {
            name: name.to_string(),
            w: store.add(format!("{name}.w"), wv)?,
            b: store.add(format!("{name}.b"), Tensor::zeros([1, 1, 1, c_out]))?,
            c_in,
            c_out,
            k,
            stride,
            pad: k / 2,
        })
    }

    /// Zero the output rows `rows` of the weight (and bias).
    pub fn zero_outputs<T: Scalar>(&self, store: &mut ParamStore<T>, rows: std::ops::Range<usize>) {
        let per = self.c_in * self.k * self.k;
        let w = &mut store.get_mut(self.w).value;
        w.data_mut()[rows.start * per..rows.end * per].fill(T::zero());
        store.get_mut(self.b).value.data_mut()[rows].fill(T::zero());
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        let y = cx.tape.conv2d(x, w, b, self.stride, self.pad)?;
        let [n, _, h, wd] = cx.tape.shape(y);
        let pos = (n * h * wd) as u64;
        cx.ledger
            .record(self.name.clone(), self.k, self.c_in, self.c_out, pos, pos, false);
        Ok(y)
    }

    pub fn flops_at(&self, out_positions: u64) -> u64 {
        2 * (self.k * self.k * self.c_in * self.c_out) as u64 * out_positions
    }
}

/// Transposed convolution, kernel 4, stride 2, padding 1 (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct Deconv {
    pub name: String,
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Deconv {
    pub const K: usize = 4;

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
    ) -> Result<Self> {
        let shape = [c_in, c_out, Self::K, Self::K];
        // Each output sees about K*K/4 taps per input channel.
        let wv = match init {
            Init::HeUniform => he_uniform(shape, c_in * Self::K * Self::K / 4, rng),
            Init::Zero => Tensor::zeros(shape),
        };
        Ok(Deconv {
            name: name.to_string(),
            w: store.add(format!("{name}.w"), wv)?,
            b: store.add(format!("{name}.b"), Tensor::zeros([1, 1, 1, c_out]))?,
            c_in,
            c_out,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.param(self.w), cx.param(self.b));
        let [n, _, h, wd] = cx.tape.shape(x);
        let y = cx.tape.deconv(x, w, b, 2, 1)?;
        let pos = (n * h * wd) as u64;
        cx.ledger
            .record(self.name.clone(), Self::K, self.c_in, self.c_out, pos, pos, false);
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Prelu {
            slope: store.add(format!("{name}.slope"), Tensor::full([1, 1, 1, channels], T::lit(PRELU_INIT)))?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.param(self.slope);
        cx.tape.prelu(x, s)
    }
}

/// Convolution followed by PReLU.
#[derive(Clone, Debug)]
pub struct ConvPrelu {
    pub conv: Conv,
    pub act: Prelu,
}

impl ConvPrelu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(ConvPrelu {
            conv: Conv::new(store, rng, name, c_in, c_out, k, stride, Init::HeUniform)?,
            act: Prelu::new(store, name, c_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        self.act.forward(cx, y)
    }
}

/// A stride-1 convolution chain whose every output is multiplied by a
/// spatial gate: `k x k` convolutions with PReLU, closed by a linear 1x1.
#[derive(Clone, Debug)]
pub struct GatedChain {
    pub layers: Vec<(Conv, Option<Prelu>)>,
}

impl GatedChain {
    pub fn c_out(&self) -> usize {
        self.layers.last().map_or(0, |(c, _)| c.c_out)
    }

    /// Dense-buffer execution; `mask` (when given) multiplies every layer output.
    pub fn forward_masked<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, mask: Option<Var>) -> Result<Var> {
        let active = mask.map(|m| cx.tape.value(m).data().iter().filter(|&&v| v != T::zero()).count() as u64);
        let mut h = x;
        for (conv, act) in &self.layers {
            let (w, b) = (cx.param(conv.w), cx.param(conv.b));
            h = match mask {
                Some(m) => crate::sparse::masked_conv_train(cx.tape, h, w, b, conv.stride, conv.pad, m)?,
                None => cx.tape.conv2d(h, w, b, conv.stride, conv.pad)?,
            };
            if let Some(a) = act {
                h = a.forward(cx, h)?;
            }
            let [n, _, hh, ww] = cx.tape.shape(h);
            let pos = (n * hh * ww) as u64;
            cx.ledger
                .record(conv.name.clone(), conv.k, conv.c_in, conv.c_out, pos, active.unwrap_or(pos), true);
        }
        Ok(h)
    }

    /// Gather/scatter execution under a hard mask; values only, no gradient.
    pub fn forward_sparse<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: Var,
        mask: &crate::sparse::PruningMask<T>,
    ) -> Result<Var> {
        let store = cx.store;
        let layers: Vec<SparseLayer<'_, T>> = self
            .layers
            .iter()
            .map(|(conv, act)| SparseLayer {
                name: conv.name.clone(),
                weight: store.value(conv.w),
                bias: store.value(conv.b),
                activation: match act {
                    Some(p) => Activation::Prelu(store.value(p.slope)),
                    None => Activation::Identity,
                },
            })
            .collect();
        let y = crate::sparse::sparse_conv_infer(cx.tape.value(x), &layers, mask, cx.ledger)?;
        Ok(cx.tape.constant(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_init_and_row_zeroing() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv::new(&mut store, &mut rng, "c", 3, 6, 3, 1, Init::HeUniform).unwrap();
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(store.value(c.w).data().iter().all(|v| v.abs() <= bound));
        c.zero_outputs(&mut store, 0..2);
        let w = store.value(c.w);
        assert!(w.data()[..2 * 27].iter().all(|&v| v == 0.0));
        assert!(w.data()[2 * 27..].iter().any(|&v| v != 0.0));
        let z = Deconv::new(&mut store, &mut rng, "d", 4, 2, Init::Zero).unwrap();
        assert_eq!(store.value(z.w).shape(), [4, 2, 4, 4]);
        assert!(Conv::new(&mut store, &mut rng, "c", 3, 6, 3, 1, Init::Zero).is_err());
    }

    #[test]
    fn ledger_records_output_positions() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv::new(&mut store, &mut rng, "c", 3, 8, 3, 2, Init::HeUniform).unwrap();
        let d = Deconv::new(&mut store, &mut rng, "d", 8, 2, Init::HeUniform).unwrap();
        let mut tape = Tape::inference();
        let mut ledger = FlopsLedger::new();
        let mut cx = Ctx::new(&mut tape, &store, &mut ledger);
        let x = cx.tape.constant(Tensor::zeros([2, 3, 16, 16]));
        let y = c.forward(&mut cx, x).unwrap();
        let z = d.forward(&mut cx, y).unwrap();
        assert_eq!(cx.tape.shape(z), [2, 2, 16, 16]);
        assert_eq!(ledger.records[0].positions_dense, 2 * 8 * 8);
        assert_eq!(ledger.records[0].flops_dense(), c.flops_at(128));
        assert_eq!(ledger.records[1].flops_dense(), 2 * 16 * 8 * 2 * 128);
    }
}

//! Image-domain operators on the tape: warping, resizing, mask sampling and
//! the two perceptual distances used by the losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Positive rational resize factor `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub const fn new(num: usize, den: usize) -> Self {
        Ratio { num, den }
    }

    pub const fn up(f: usize) -> Self {
        Ratio { num: f, den: 1 }
    }

    pub const fn down(f: usize) -> Self {
        Ratio { num: 1, den: f }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn apply(&self, len: usize) -> Option<usize> {
        let scaled = len * self.num;
        (self.den != 0 && scaled % self.den == 0 && scaled > 0).then_some(scaled / self.den)
    }
}

/// Sample `src` at `(x + u, y + v)`; coordinates are clamped to the border.
pub fn warp_backward<T: Scalar>(tape: &mut Tape<T>, src: Var, flow: Var) -> Result<Var> {
    tape.warp(src, flow)
}

/// Bilinear resize by `scale` (align-corners = false).
pub fn bilinear_resize<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: Ratio) -> Result<Var> {
    let [_, _, h, w] = tape.shape(x);
    match (scale.apply(h), scale.apply(w)) {
        (Some(oh), Some(ow)) => tape.resize(x, oh, ow),
        _ => Err(Error::contract(
            "bilinear_resize",
            format!("{h}x{w} scaled by {}/{} has no positive integer extent", scale.num, scale.den),
        )),
    }
}

/// Resize a flow field; displacements are rescaled with the resolution.
pub fn resize_flow<T: Scalar>(tape: &mut Tape<T>, flow: Var, scale: Ratio) -> Result<Var> {
    let r = bilinear_resize(tape, flow, scale)?;
    if scale.num == scale.den {
        return Ok(r);
    }
    tape.scale(r, T::lit(scale.as_f64()))
}

/// Non-overlapping `factor x factor` mean pooling.
pub fn avg_downsample<T: Scalar>(tape: &mut Tape<T>, m: Var, factor: usize) -> Result<Var> {
    tape.avg_pool(m, factor)
}

/// Gumbel(0, 1) noise for two-channel logits, drawn as `-ln(-ln U)`.
pub fn gumbel_noise<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            T::lit(-(-u.ln()).ln())
        })
        .collect();
    Tensor::from_vec(shape, data).expect("noise shape")
}

/// Two-way Gumbel softmax returning the channel-0 probability as a
/// `(N, 1, H, W)` mask.
///
/// Soft mode: `P = exp((l0+G0)/tau) / sum_i exp((li+Gi)/tau)`, differentiable.
/// Hard mode ignores noise and returns `1` where `l0 >= l1`, else `0`.
pub fn gumbel_softmax_with_noise<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    tau: T,
    noise: Option<&Tensor<T>>,
    hard: bool,
) -> Result<Var> {
    if tau.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::contract("gumbel_softmax", format!("tau must be positive, got {tau}")));
    }
    let [n, c, h, w] = tape.shape(logits);
    if c != 2 {
        return Err(Error::dim("gumbel_softmax", &[n, c, h, w], &[n, 2, h, w]));
    }
    if hard {
        let l = tape.value(logits);
        let mask = Tensor::from_fn([n, 1, h, w], |[ni, _, y, x]| {
            if l.at(ni, 0, y, x) >= l.at(ni, 1, y, x) {
                T::one()
            } else {
                T::zero()
            }
        });
        return Ok(tape.constant(mask));
    }
    let mut z = logits;
    if let Some(g) = noise {
        if g.shape() != [n, 2, h, w] {
            return Err(Error::dim("gumbel_softmax", &[n, 2, h, w], &g.shape()));
        }
        let g = tape.constant(g.clone());
        z = tape.add(z, g)?;
    }
    let l0 = tape.slice_channels(z, 0, 1)?;
    let l1 = tape.slice_channels(z, 1, 1)?;
    let d = tape.sub(l0, l1)?;
    let d = tape.scale(d, T::one() / tau)?;
    tape.sigmoid(d)
}

/// [`gumbel_softmax_with_noise`] with noise drawn from `noise_seed`
/// (`None` means no noise).
pub fn gumbel_softmax<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    tau: T,
    noise_seed: Option<u64>,
    hard: bool,
) -> Result<Var> {
    let noise = match (hard, noise_seed) {
        (false, Some(seed)) => Some(gumbel_noise(tape.shape(logits), seed)),
        _ => None,
    };
    gumbel_softmax_with_noise(tape, logits, tau, noise.as_ref(), hard)
}

/// Mean soft census distance between two same-shape tensors.
pub fn census_distance<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    tape.census(a, b)
}

/// Weighted L1 distance between Laplacian pyramids:
/// `sum_l 2^l * mean|L_l(a) - L_l(b)|`.
///
/// Pyramids are built with the 5-tap binomial kernel; the expand step is a
/// bilinear 2x upsample. The pyramid is linear, so it is built once on `a - b`.
pub fn laplacian_l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, levels: usize) -> Result<Var> {
    let [_, _, h, w] = tape.shape(a);
    let f = 1usize << levels.saturating_sub(1);
    if levels == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::contract(
            "laplacian_l1",
            format!("extent {h}x{w} not divisible by {f} for {levels} levels"),
        ));
    }
    let mut g = tape.sub(a, b)?;
    let mut total: Option<Var> = None;
    for level in 0..levels {
        let band = if level + 1 == levels {
            g
        } else {
            let down = tape.blur_down(g)?;
            let [_, _, gh, gw] = tape.shape(g);
            let up = tape.resize(down, gh, gw)?;
            let band = tape.sub(g, up)?;
            g = down;
            band
        };
        let abs = tape.abs(band)?;
        let m = tape.mean(abs)?;
        let term = tape.scale(m, T::lit((1u64 << level) as f64))?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("levels > 0"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run<T: Scalar>(f: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Tensor<T> {
        let mut tape = Tape::inference();
        let v = f(&mut tape).unwrap();
        tape.take_value(v)
    }

    #[test]
    fn zero_flow_is_identity() {
        let src = Tensor::<f32>::from_fn([1, 3, 5, 4], |[_, c, y, x]| (c * 31 + y * 7 + x) as f32 * 0.013);
        let out = run(|t| {
            let s = t.constant(src.clone());
            let f = t.constant(Tensor::zeros([1, 2, 5, 4]));
            warp_backward(t, s, f)
        });
        assert_eq!(out, src);
    }

    #[test]
    fn resize_two_by_two_matches_half_pixel_formula() {
        // Independent oracle: explicit source coordinate per output pixel.
        let src = [[0.0f64, 2.0], [4.0, 6.0]];
        let sample = |o: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(1), s - i0 as f64)
        };
        let out = run(|t| {
            let x = t.constant(Tensor::from_vec([1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
            bilinear_resize(t, x, Ratio::up(2))
        });
        for oy in 0..4 {
            for ox in 0..4 {
                let (y0, y1, ly) = sample(oy);
                let (x0, x1, lx) = sample(ox);
                let top = src[y0][x0] * (1.0 - lx) + src[y0][x1] * lx;
                let bot = src[y1][x0] * (1.0 - lx) + src[y1][x1] * lx;
                let want = top * (1.0 - ly) + bot * ly;
                assert!((out.at(0, 0, oy, ox) - want).abs() < 1e-12);
            }
        }
        // first row is [0, 0.5, 1.5, 2]
        assert_eq!(&out.data()[..4], &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn flow_upsampling_rescales_displacements() {
        let out = run(|t| {
            let f = t.constant(Tensor::from_fn([1, 2, 4, 4], |[_, c, _, _]| if c == 0 { 1.0 } else { 0.0 }));
            resize_flow(t, f, Ratio::up(2))
        });
        assert_eq!(out.shape(), [1, 2, 8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.at(0, 0, y, x), 2.0f64);
                assert_eq!(out.at(0, 1, y, x), 0.0);
            }
        }
    }

    #[test]
    fn resize_rejects_fractional_extent() {
        let mut t = Tape::<f32>::inference();
        let x = t.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(bilinear_resize(&mut t, x, Ratio::down(2)).is_err());
    }

    #[test]
    fn avg_downsample_values_and_errors() {
        let out = run(|t| {
            let x = t.constant(Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
            avg_downsample(t, x, 2)
        });
        assert_eq!(out.data(), &[0.5]);
        let ones = run(|t| {
            let x = t.constant(Tensor::<f64>::ones([1, 1, 4, 4]));
            avg_downsample(t, x, 2)
        });
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let mut t = Tape::<f64>::inference();
        let x = t.constant(Tensor::zeros([1, 1, 5, 4]));
        assert!(avg_downsample(&mut t, x, 2).is_err());
    }

    #[test]
    fn gumbel_examples() {
        let p = |l0: f64, l1: f64, g: Option<(f64, f64)>, tau: f64| -> f64 {
            run(|t| {
                let l = t.constant(Tensor::from_vec([1, 2, 1, 1], vec![l0, l1]).unwrap());
                let noise = g.map(|(a, b)| Tensor::from_vec([1, 2, 1, 1], vec![a, b]).unwrap());
                gumbel_softmax_with_noise(t, l, tau, noise.as_ref(), false)
            })
            .item()
        };
        assert_eq!(p(0.3, 0.3, None, 1.0), 0.5);
        assert!(p(10.0, 0.0, None, 0.1) >= 1.0 - 1e-8);
        let want = 1.3f64.exp() / (1.3f64.exp() + (-0.2f64).exp());
        assert!((p(1.0, 0.0, Some((0.3, -0.2)), 1.0) - want).abs() < 1e-12);
        assert!((want - 0.8176).abs() < 1e-4);
    }

    #[test]
    fn gumbel_rejects_bad_tau_and_hardens() {
        let mut t = Tape::<f32>::inference();
        let l = t.constant(Tensor::from_vec([1, 2, 1, 2], vec![1.0, -1.0, 0.0, 0.5]).unwrap());
        assert!(gumbel_softmax(&mut t, l, 0.0, None, false).is_err());
        let m = gumbel_softmax(&mut t, l, 1.0, Some(3), true).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, 0.0]);
    }

    #[test]
    fn gumbel_noise_is_seeded() {
        let a = gumbel_noise::<f32>([1, 2, 4, 4], 9);
        let b = gumbel_noise::<f32>([1, 2, 4, 4], 9);
        let c = gumbel_noise::<f32>([1, 2, 4, 4], 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
    }

    #[test]
    fn laplacian_single_level_is_mae() {
        let a = Tensor::<f64>::from_fn([1, 3, 8, 8], |[_, c, y, x]| ((c + y * x) % 5) as f64 * 0.1);
        let b = a.map(|v| v * 0.5 + 0.01);
        let want = a.zip_map(&b, |p, q| (p - q).abs()).unwrap().mean();
        let got = run(|t| {
            let (pa, pb) = (t.constant(a.clone()), t.constant(b.clone()));
            laplacian_l1(t, pa, pb, 1)
        })
        .item();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn laplacian_zero_on_equal_inputs_and_rejects_indivisible() {
        let a = Tensor::<f64>::from_fn([1, 1, 16, 16], |[_, _, y, x]| (y * x) as f64 / 256.0);
        let got = run(|t| {
            let p = t.constant(a.clone());
            laplacian_l1(t, p, p, 5)
        });
        assert_eq!(got.item(), 0.0);
        let mut t = Tape::<f64>::inference();
        let p = t.constant(Tensor::zeros([1, 1, 24, 24]));
        assert!(laplacian_l1(&mut t, p, p, 5).is_err());
    }
}

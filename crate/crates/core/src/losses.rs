//! Training objectives of the interpolation network.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vision::{avg_downsample, census_distance, laplacian_l1};

pub const LAPLACIAN_LEVELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub sparse: f64,
    pub ugm: f64,
    pub self_contrast: f64,
    /// Target mask density `S_t`.
    pub target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sparse: 0.01,
            ugm: 0.01,
            self_contrast: 0.01,
            target: 0.35,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.sparse, self.ugm, self.self_contrast].iter().all(|w| *w >= 0.0 && w.is_finite());
        if !ok || !(self.target > 0.0 && self.target <= 1.0) {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Reconstruction loss: Laplacian-pyramid L1 with five levels, or as many as
/// the extent allows.
pub fn loss_rec<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let [_, _, h, w] = tape.shape(pred);
    let mut levels = LAPLACIAN_LEVELS;
    while levels > 1 && (h % (1 << (levels - 1)) != 0 || w % (1 << (levels - 1)) != 0) {
        levels -= 1;
    }
    laplacian_l1(tape, pred, gt, levels)
}

/// `|sum of all mask values / total positions - S_t|`, pooled over the three
/// scales per sample, then averaged over the batch.
pub fn loss_sparse<T: Scalar>(tape: &mut Tape<T>, masks: &[Var; 3], target: f64) -> Result<Var> {
    let n = tape.shape(masks[0])[0];
    let mut positions = 0usize;
    let mut sum: Option<Var> = None;
    for &m in masks {
        let s = tape.shape(m);
        if s[0] != n || s[1] != 1 {
            return Err(Error::dim("loss_sparse", &s, &[n, 1, s[2], s[3]]));
        }
        positions += s[2] * s[3];
        let per = tape.sum_per_item(m)?;
        sum = Some(match sum {
            Some(a) => tape.add(a, per)?,
            None => per,
        });
    }
    let d = tape.scale(sum.expect("three masks"), T::lit(1.0 / positions as f64))?;
    let d = tape.add_scalar(d, T::lit(-target))?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Pooled soft density of the three masks (the quantity `loss_sparse` steers).
pub fn pooled_density<T: Scalar>(tape: &Tape<T>, masks: &[Var; 3]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for &m in masks {
        let v = tape.value(m);
        s += v.sum().as_f64();
        n += v.len();
    }
    s / n as f64
}

/// `sum_k mean|avgpool(P^k_u, 2^(k+1)) - P_(k+1)|` with full-resolution labels.
pub fn loss_ugm<T: Scalar>(tape: &mut Tape<T>, labels: &[Var; 3], masks: &[Var; 3]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for k in 0..3 {
        let d = avg_downsample(tape, labels[k], 1 << (k + 1))?;
        let (ds, ms) = (tape.shape(d), tape.shape(masks[k]));
        if ds != ms {
            return Err(Error::dim("loss_ugm", &ds, &ms));
        }
        let e = tape.sub(d, masks[k])?;
        let e = tape.abs(e)?;
        let e = tape.mean(e)?;
        total = Some(match total {
            Some(t) => tape.add(t, e)?,
            None => e,
        });
    }
    Ok(total.expect("three levels"))
}

/// Reconstruction loss of the dense branch plus the census distance between
/// the pruned and dense intermediate features. Nothing is detached.
pub fn loss_selfcontrast<T: Scalar>(
    tape: &mut Tape<T>,
    dense_frame: Var,
    gt: Var,
    dense_features: &[Var],
    pruned_features: &[Var],
) -> Result<Var> {
    if dense_features.len() != pruned_features.len() || dense_features.is_empty() {
        return Err(Error::contract("loss_selfcontrast", "dense branch features missing"));
    }
    let mut total = loss_rec(tape, dense_frame, gt)?;
    for (&d, &p) in dense_features.iter().zip(pruned_features) {
        let c = census_distance(tape, d, p)?;
        total = tape.add(total, c)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub sparse: f64,
    pub ugm: f64,
    pub self_contrast: f64,
    pub total: f64,
}

impl LossParts {
    pub fn all_finite(&self) -> bool {
        [self.rec, self.sparse, self.ugm, self.self_contrast, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl std::fmt::Display for LossParts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L_rec={:.6} L_s={:.6} L_ugm={:.6} L_sc={:.6} total={:.6}",
            self.rec, self.sparse, self.ugm, self.self_contrast, self.total
        )
    }
}

/// `L_rec + l_s L_s + l_ugm L_ugm + l_sc L_sc`; returns the combined variable
/// and the value of every part.
pub fn loss_overall<T: Scalar>(
    tape: &mut Tape<T>,
    rec: Var,
    sparse: Var,
    ugm: Var,
    sc: Var,
    w: &LossWeights,
) -> Result<(Var, LossParts)> {
    let mut total = rec;
    for (v, k) in [(sparse, w.sparse), (ugm, w.ugm), (sc, w.self_contrast)] {
        let s = tape.scale(v, T::lit(k))?;
        total = tape.add(total, s)?;
    }
    let parts = LossParts {
        rec: tape.scalar(rec).as_f64(),
        sparse: tape.scalar(sparse).as_f64(),
        ugm: tape.scalar(ugm).as_f64(),
        self_contrast: tape.scalar(sc).as_f64(),
        total: tape.scalar(total).as_f64(),
    };
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn c(t: &mut Tape<f64>, shape: [usize; 4], v: f64) -> Var {
        t.constant(Tensor::full(shape, v))
    }

    #[test]
    fn sparse_loss_examples() {
        let mut t = Tape::inference();
        let s = [[1, 1, 32, 32], [1, 1, 16, 16], [1, 1, 8, 8]];
        let m = s.map(|sh| c(&mut t, sh, 0.35));
        let l = loss_sparse(&mut t, &m, 0.35).unwrap();
        assert!(t.scalar(l).abs() < 1e-12);
        let m = s.map(|sh| c(&mut t, sh, 1.0));
        let l = loss_sparse(&mut t, &m, 0.35).unwrap();
        assert!((t.scalar(l) - 0.65).abs() < 1e-12);
        let m = [c(&mut t, s[0], 1.0), c(&mut t, s[1], 0.5), c(&mut t, s[2], 0.0)];
        let l = loss_sparse(&mut t, &m, 0.35).unwrap();
        assert!((t.scalar(l) - ((1024.0 + 128.0) / 1344.0 - 0.35)).abs() < 1e-12);
    }

    #[test]
    fn ugm_loss_examples() {
        let mut t = Tape::inference();
        let lab = [c(&mut t, [1, 1, 16, 16], 1.0), c(&mut t, [1, 1, 16, 16], 1.0), c(&mut t, [1, 1, 16, 16], 1.0)];
        let zero = [c(&mut t, [1, 1, 8, 8], 0.0), c(&mut t, [1, 1, 4, 4], 0.0), c(&mut t, [1, 1, 2, 2], 0.0)];
        let l = loss_ugm(&mut t, &lab, &zero).unwrap();
        assert_eq!(t.scalar(l), 3.0);
        let one = [c(&mut t, [1, 1, 8, 8], 1.0), c(&mut t, [1, 1, 4, 4], 1.0), c(&mut t, [1, 1, 2, 2], 1.0)];
        let l = loss_ugm(&mut t, &lab, &one).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        // Half-ones checkerboard pools to 0.5 everywhere.
        let cb = t.constant(Tensor::from_fn([1, 1, 16, 16], |[_, _, y, x]| ((x + y) % 2) as f64));
        let half = [c(&mut t, [1, 1, 8, 8], 0.5), one[1], one[2]];
        let l = loss_ugm(&mut t, &[cb, lab[1], lab[2]], &half).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        assert!(loss_ugm(&mut t, &lab, &[one[1], one[1], one[2]]).is_err());
    }

    #[test]
    fn overall_combination() {
        let mut t = Tape::<f64>::inference();
        let p = [0.2, 0.1, 0.3, 0.4].map(|v| t.constant(Tensor::scalar(v)));
        let (v, parts) = loss_overall(&mut t, p[0], p[1], p[2], p[3], &LossWeights::default()).unwrap();
        assert!((t.scalar(v) - 0.208).abs() < 1e-12);
        assert_eq!(parts.rec, 0.2);
        let zero = LossWeights {
            sparse: 0.0,
            ugm: 0.0,
            self_contrast: 0.0,
            target: 0.5,
        };
        let (v, _) = loss_overall(&mut t, p[0], p[1], p[2], p[3], &zero).unwrap();
        assert_eq!(t.scalar(v), 0.2);
    }

    #[test]
    fn rec_and_selfcontrast_vanish_on_perfect_inputs() {
        let mut t = Tape::inference();
        let img = t.constant(Tensor::from_fn([1, 3, 32, 32], |[_, c, y, x]| ((c + y * x) % 7) as f64 / 7.0));
        let l = loss_rec(&mut t, img, img).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let f = t.constant(Tensor::from_fn([1, 4, 8, 8], |[_, c, y, x]| (c * 3 + y * 5 + x) as f64 * 0.1));
        let l = loss_selfcontrast(&mut t, img, img, &[f], &[f]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        assert!(loss_selfcontrast(&mut t, img, img, &[], &[]).is_err());
    }
}

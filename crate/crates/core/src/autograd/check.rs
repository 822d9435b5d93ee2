//! Finite-difference gradient checking.
//!
//! Inputs to check are registered as parameters; the loss closure rebuilds
//! the graph from scratch on every evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Elements sampled per parameter (all of them when the tensor is smaller).
    pub samples_per_param: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            samples_per_param: 16,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare autodiff gradients of `loss` with central differences.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, cfg: &GradCheckConfig, mut loss: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    tape.backward(l, store)?;

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::inference();
        let l = loss(&mut tape, store)?;
        Ok(tape.scalar(l).as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let len = store.value(id).len();
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cfg.samples_per_param);
        idx.sort_unstable();
        for i in idx {
            let orig = store.value(id).data()[i];
            let h = T::lit(cfg.step);
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = store.get(id).grad.data()[i].as_f64();
            report.entries.push(GradCheckEntry {
                param: store.get(id).name.clone(),
                index: i,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric, cfg.floor),
            });
        }
    }
    Ok(report)
}

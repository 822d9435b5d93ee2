//! Two-phase training.
//!
//! Phase 1 fits the UEN with the sparse uncertainty loss and derives mask
//! labels from its uncertainty fields. Phase 2 fits the interpolation network
//! with the pruned and the dense branch on one tape and a single combined
//! backward of the overall loss.
//!
//! All randomness (epoch permutations, crops, flips, Gumbel noise) is derived
//! from `(seed, global step)`, so a trainer rebuilt from a checkpoint takes
//! exactly the step the original would have taken next.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, SynthSpec, Triplet};
use crate::error::{Error, Result};
use crate::losses::{loss_ugm, loss_overall, loss_rec, loss_selfcontrast, loss_sparse, LossParts, LossWeights};
use crate::nn::Ctx;
use crate::optim::{cosine_lr, tau_schedule, AdamConfig, AdamW};
use crate::scalar::Scalar;
use crate::sparse::FlopsLedger;
use crate::tensor::Tensor;
use crate::uen::{alphas_for_sparsity, gen_mask_labels, loss_su, LabelPlane, MaskLabels, Uen};
use crate::vfi::{mix_seed, ForwardOpts, NetConfig, VfiNet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the dataset.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub patch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Label skip percentages; derived from the target sparsity when unset.
    pub alphas: Option<[f64; 3]>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub net: NetConfig,
    pub hflip: bool,
    /// Train only the dense branch with the reconstruction loss.
    pub dense_only: bool,
    pub finite_checks: bool,
    pub data_dir: Option<PathBuf>,
    pub lenient: bool,
    pub synth: SynthSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 30,
            phase2_epochs: 60,
            steps_per_epoch: 0,
            batch_size: 8,
            patch: 64,
            lr_start: 1e-4,
            lr_end: 1e-5,
            weight_decay: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            alphas: None,
            tau_start: 5.0,
            tau_end: 0.1,
            net: NetConfig::default(),
            hflip: true,
            dense_only: false,
            finite_checks: false,
            data_dir: None,
            lenient: false,
            synth: SynthSpec::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "phase1_epochs" => self.phase1_epochs = parse(k, v)?,
            "phase2_epochs" => self.phase2_epochs = parse(k, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "patch" => self.patch = parse(k, v)?,
            "lr_start" => self.lr_start = parse(k, v)?,
            "lr_end" => self.lr_end = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "target_sparsity" | "s_t" => self.weights.target = parse(k, v)?,
            "lambda_s" => self.weights.sparse = parse(k, v)?,
            "lambda_ugm" => self.weights.ugm = parse(k, v)?,
            "lambda_sc" => self.weights.self_contrast = parse(k, v)?,
            "alphas" => {
                let a: Vec<f64> = v.split(',').map(|x| parse(k, x)).collect::<Result<_>>()?;
                let a: [f64; 3] = a
                    .try_into()
                    .map_err(|_| Error::Config("alphas: expected three comma-separated values".into()))?;
                self.alphas = Some(a);
            }
            "tau_start" => self.tau_start = parse(k, v)?,
            "tau_end" => self.tau_end = parse(k, v)?,
            "width_mult" => self.net.width_mult = parse(k, v)?,
            "sparse_convs" => self.net.sparse_convs = parse(k, v)?,
            "hflip" => self.hflip = parse_bool(k, v)?,
            "dense_only" => self.dense_only = parse_bool(k, v)?,
            "finite_checks" => self.finite_checks = parse_bool(k, v)?,
            "lenient" => self.lenient = parse_bool(k, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v.trim())),
            "synth_seed" => self.synth.seed = parse(k, v)?,
            "synth_count" => self.synth.count = parse(k, v)?,
            "synth_height" => self.synth.height = parse(k, v)?,
            "synth_width" => self.synth.width = parse(k, v)?,
            "synth_shapes" => self.synth.n_shapes = parse(k, v)?,
            "synth_max_disp" => self.synth.max_disp = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a flat `key = value` text; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad(format!("need 0 < lr_end <= lr_start, got {} / {}", self.lr_end, self.lr_start));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return bad(format!("need 0 < tau_end <= tau_start, got {} / {}", self.tau_end, self.tau_start));
        }
        if self.batch_size == 0 || self.patch == 0 || self.patch % 16 != 0 {
            return bad(format!("batch_size must be positive and patch a multiple of 16 (patch={})", self.patch));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if let Some(a) = self.alphas {
            if a.iter().any(|x| !(0.0..100.0).contains(x)) {
                return bad(format!("alphas {a:?} outside [0, 100)"));
            }
        }
        self.weights.validate()?;
        self.net.validate()
    }

    pub fn alphas(&self) -> [f64; 3] {
        self.alphas.unwrap_or_else(|| alphas_for_sparsity(self.weights.target))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data_dir {
            Some(d) => Ok(Dataset::Dir(crate::data::DirDataset::open(d, self.lenient)?)),
            None => Ok(Dataset::Synthetic(self.synth)),
        }
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            (n / self.batch_size).max(1)
        }
    }
}

/// One training step's log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub phase: u8,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub parts: LossParts,
    /// Mean soft density of `P1, P2, P3` (phase 2, pruned branch).
    pub densities: Option<[f64; 3]>,
    /// Pooled soft density over the three masks.
    pub pooled_density: Option<f64>,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "phase={} epoch={} step={} lr={:.3e}", self.phase, self.epoch, self.step, self.lr)?;
        if self.phase == 1 {
            return write!(f, " L_su={:.6}", self.parts.total);
        }
        write!(f, " tau={:.4} {}", self.tau, self.parts)?;
        if let Some(d) = self.densities {
            write!(f, " density={:.4},{:.4},{:.4}", d[0], d[1], d[2])?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub i0: Tensor<T>,
    pub gt: Tensor<T>,
    pub i1: Tensor<T>,
    pub ids: Vec<u64>,
    /// Full-resolution labels `[P^0u, P^1u, P^2u]`, cropped like the frames.
    pub labels: Option<[Tensor<T>; 3]>,
}

/// Sample positions of global step `step`: epoch-seeded permutation, read cyclically.
fn batch_indices(seed: u64, n: usize, batch: usize, spe: usize, step: u64) -> (usize, Vec<usize>) {
    let epoch = (step / spe as u64) as usize;
    let within = (step % spe as u64) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE90C_0000 + epoch as u64)));
    let idx = (0..batch).map(|i| perm[(within * batch + i) % n]).collect();
    (epoch, idx)
}

/// Crop, optionally flip, and stack the samples; label planes follow the
/// same offsets.
pub fn make_batch<T: Scalar>(
    ds: &Dataset,
    idx: &[usize],
    patch: usize,
    hflip: bool,
    rng: &mut ChaCha8Rng,
    labels: Option<&HashMap<u64, MaskLabels>>,
) -> Result<Batch<T>> {
    let (mut a, mut g, mut b, mut ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut lab: [Vec<Tensor<T>>; 3] = Default::default();
    for &i in idx {
        let t: Triplet<T> = ds.get(i)?;
        let (h, w) = (t.height(), t.width());
        if h < patch || w < patch {
            return Err(Error::contract("make_batch", format!("sample {i} ({h}x{w}) smaller than patch {patch}")));
        }
        let y0 = rng.gen_range(0..=(h - patch) / 16) * 16;
        let x0 = rng.gen_range(0..=(w - patch) / 16) * 16;
        let flip = hflip && rng.gen_bool(0.5);
        let mut c = t.crop(y0, x0, patch, patch);
        if flip {
            c = c.flip_horizontal();
        }
        if let Some(map) = labels {
            let l = map.get(&t.sample_id).ok_or(Error::MissingLabel(t.sample_id))?;
            for k in 0..3 {
                let p = &l.planes[k];
                if (p.h, p.w) != (h, w) {
                    return Err(Error::dim("make_batch: label", &[p.h, p.w], &[h, w]));
                }
                let mut pc: LabelPlane = p.crop(y0, x0, patch, patch);
                if flip {
                    pc = pc.flip_horizontal();
                }
                lab[k].push(pc.to_tensor());
            }
        }
        a.push(c.i0);
        g.push(c.gt);
        b.push(c.i1);
        ids.push(t.sample_id);
    }
    let labels = if labels.is_some() {
        let [l0, l1, l2] = lab;
        Some([Tensor::stack(&l0)?, Tensor::stack(&l1)?, Tensor::stack(&l2)?])
    } else {
        None
    };
    Ok(Batch {
        i0: Tensor::stack(&a)?,
        gt: Tensor::stack(&g)?,
        i1: Tensor::stack(&b)?,
        ids,
        labels,
    })
}

fn diverged(epoch: usize, step: u64, ids: &[u64], parts: &LossParts) -> Error {
    Error::Diverged {
        epoch,
        step: step as usize,
        batch: ids.to_vec(),
        parts: parts.to_string(),
    }
}

fn check_grads<T: Scalar>(store: &ParamStore<T>) -> Result<()> {
    match store.iter().find(|(_, p)| !p.grad.all_finite()) {
        Some((_, p)) => Err(Error::contract(
            "train",
            format!("non-finite gradient in {}", p.name),
        )),
        None => Ok(()),
    }
}

/// Phase-1 state.
pub struct UenTrainer<T> {
    pub cfg: TrainConfig,
    pub uen: Uen,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub step: u64,
}

impl<T: Scalar> UenTrainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1));
        let uen = Uen::new(&mut store, &mut rng, cfg.net)?;
        let opt = AdamW::new(&store, cfg.adam());
        Ok(UenTrainer {
            cfg,
            uen,
            store,
            opt,
            step: 0,
        })
    }

    /// Rebuild from a checkpoint written by [`Self::checkpoint`].
    pub fn from_checkpoint(mut cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.net = ck.net_config()?;
        let mut t = Self::new(cfg)?;
        ck.load_into(&mut t.store, Uen::PREFIX)?;
        if let Some(opt) = ck.optimizer(&t.store, t.cfg.adam())? {
            t.opt = opt;
        }
        t.step = ck.meta("global_step").unwrap_or(0.0) as u64;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store, &self.cfg.net);
        ck.add_optimizer(&self.store, &self.opt);
        ck.set_meta("global_step", self.step as f64);
        ck
    }

    pub fn total_steps(&self, ds: &Dataset) -> u64 {
        (self.cfg.phase1_epochs * self.cfg.steps_per_epoch(ds.len())) as u64
    }

    pub fn train_step(&mut self, ds: &Dataset) -> Result<StepLog> {
        let cfg = &self.cfg;
        let spe = cfg.steps_per_epoch(ds.len());
        let (epoch, idx) = batch_indices(cfg.seed, ds.len(), cfg.batch_size, spe, self.step);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x1111, self.step));
        let batch: Batch<T> = make_batch(ds, &idx, cfg.patch, cfg.hflip, &mut rng, None)?;
        let lr = cosine_lr(epoch, cfg.phase1_epochs, cfg.lr_start, cfg.lr_end);

        let mut tape = Tape::new().with_finite_checks(cfg.finite_checks);
        let mut ledger = FlopsLedger::new();
        let loss = {
            let mut cx = Ctx::new(&mut tape, &self.store, &mut ledger);
            let i0 = cx.tape.constant(batch.i0);
            let i1 = cx.tape.constant(batch.i1);
            let gt = cx.tape.constant(batch.gt);
            let out = self.uen.forward(&mut cx, i0, i1)?;
            loss_su(cx.tape, &out.frames, gt, &out.uncertainty)?
        };
        let v = tape.scalar(loss).as_f64();
        let parts = LossParts {
            rec: 0.0,
            sparse: 0.0,
            ugm: 0.0,
            self_contrast: 0.0,
            total: v,
        };
        if !v.is_finite() {
            return Err(diverged(epoch, self.step, &batch.ids, &parts));
        }
        self.store.zero_grads();
        tape.backward(loss, &mut self.store)?;
        check_grads(&self.store)?;
        self.opt.step(&mut self.store, lr)?;
        let log = StepLog {
            phase: 1,
            epoch,
            step: self.step,
            lr,
            tau: 0.0,
            parts,
            densities: None,
            pooled_density: None,
        };
        self.step += 1;
        Ok(log)
    }

    /// Train until the configured number of epochs is reached.
    pub fn run(&mut self, ds: &Dataset, on_step: &mut dyn FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let total = self.total_steps(ds);
        let mut logs = Vec::new();
        while self.step < total {
            let l = self.train_step(ds)?;
            on_step(&l);
            logs.push(l);
        }
        Ok(logs)
    }

    /// Labels for every sample of `ds` at full resolution.
    pub fn labels(&self, ds: &Dataset, alphas: [f64; 3]) -> Result<Vec<MaskLabels>> {
        generate_labels(&self.uen, &self.store, ds, alphas)
    }
}

pub fn generate_labels<T: Scalar>(
    uen: &Uen,
    store: &ParamStore<T>,
    ds: &Dataset,
    alphas: [f64; 3],
) -> Result<Vec<MaskLabels>> {
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let t: Triplet<T> = ds.get(i)?;
        let u = uen.predict_uncertainty(store, &t.i0, &t.i1)?;
        out.extend(gen_mask_labels(&u, alphas, &[t.sample_id])?);
    }
    Ok(out)
}

/// Phase-2 state.
pub struct VfiTrainer<T> {
    pub cfg: TrainConfig,
    pub net: VfiNet,
    pub store: ParamStore<T>,
    pub opt: AdamW<T>,
    pub step: u64,
    labels: Option<HashMap<u64, MaskLabels>>,
}

impl<T: Scalar> VfiTrainer<T> {
    /// `labels` are required unless the run is dense-only or `lambda_ugm = 0`.
    pub fn new(cfg: TrainConfig, labels: Option<Vec<MaskLabels>>) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 2));
        let net = VfiNet::new(&mut store, &mut rng, cfg.net)?;
        let opt = AdamW::new(&store, cfg.adam());
        let needs = !cfg.dense_only && cfg.weights.ugm > 0.0;
        if needs && labels.is_none() {
            return Err(Error::contract("train_phase2", "mask labels are required when lambda_ugm > 0"));
        }
        let labels = if needs {
            labels.map(|v| v.into_iter().map(|l| (l.sample_id, l)).collect())
        } else {
            None
        };
        Ok(VfiTrainer {
            cfg,
            net,
            store,
            opt,
            step: 0,
            labels,
        })
    }

    pub fn from_checkpoint(mut cfg: TrainConfig, labels: Option<Vec<MaskLabels>>, ck: &Checkpoint) -> Result<Self> {
        cfg.net = ck.net_config()?;
        let mut t = Self::new(cfg, labels)?;
        ck.load_into(&mut t.store, VfiNet::PREFIX)?;
        if let Some(opt) = ck.optimizer(&t.store, t.cfg.adam())? {
            t.opt = opt;
        }
        t.step = ck.meta("global_step").unwrap_or(0.0) as u64;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store, &self.cfg.net);
        ck.add_optimizer(&self.store, &self.opt);
        ck.set_meta("global_step", self.step as f64);
        ck
    }

    pub fn total_steps(&self, ds: &Dataset) -> u64 {
        (self.cfg.phase2_epochs * self.cfg.steps_per_epoch(ds.len())) as u64
    }

    /// Check that every sample has a label before training starts.
    pub fn check_labels(&self, ds: &Dataset) -> Result<()> {
        if let Some(map) = &self.labels {
            for i in 0..ds.len() as u64 {
                if !map.contains_key(&i) {
                    return Err(Error::MissingLabel(i));
                }
            }
        }
        Ok(())
    }

    pub fn train_step(&mut self, ds: &Dataset) -> Result<StepLog> {
        let cfg = &self.cfg;
        let spe = cfg.steps_per_epoch(ds.len());
        let (epoch, idx) = batch_indices(cfg.seed, ds.len(), cfg.batch_size, spe, self.step);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x2222, self.step));
        let batch: Batch<T> = make_batch(ds, &idx, cfg.patch, cfg.hflip, &mut rng, self.labels.as_ref())?;
        let lr = cosine_lr(epoch, cfg.phase2_epochs, cfg.lr_start, cfg.lr_end);
        let tau = tau_schedule(epoch, cfg.phase2_epochs, cfg.tau_start, cfg.tau_end);
        let w = cfg.weights;

        let mut tape = Tape::new().with_finite_checks(cfg.finite_checks);
        let mut ledger = FlopsLedger::new();
        let (loss, parts, densities) = {
            let mut cx = Ctx::new(&mut tape, &self.store, &mut ledger);
            let i0 = cx.tape.constant(batch.i0);
            let i1 = cx.tape.constant(batch.i1);
            let gt = cx.tape.constant(batch.gt);
            if cfg.dense_only {
                let de = self.net.forward(&mut cx, i0, i1, &ForwardOpts::dense())?;
                let rec = loss_rec(cx.tape, de.frame, gt)?;
                let zero = cx.tape.constant(Tensor::scalar(T::zero()));
                let off = LossWeights {
                    sparse: 0.0,
                    ugm: 0.0,
                    self_contrast: 0.0,
                    ..w
                };
                let (l, p) = loss_overall(cx.tape, rec, zero, zero, zero, &off)?;
                (l, p, None)
            } else {
                let opts = ForwardOpts::pruned(crate::vfi::Exec::Train, tau, Some(mix_seed(cfg.seed, self.step)));
                let pr = self.net.forward(&mut cx, i0, i1, &opts)?;
                let masks = pr.masks.expect("pruned branch yields masks");
                let rec = loss_rec(cx.tape, pr.frame, gt)?;
                let ls = loss_sparse(cx.tape, &masks, w.target)?;
                let lugm = match &batch.labels {
                    Some(l) if w.ugm > 0.0 => {
                        let lv = [0, 1, 2].map(|k| cx.tape.constant(l[k].clone()));
                        loss_ugm(cx.tape, &lv, &masks)?
                    }
                    _ => cx.tape.constant(Tensor::scalar(T::zero())),
                };
                let lsc = if w.self_contrast > 0.0 {
                    let de = self.net.forward(&mut cx, i0, i1, &ForwardOpts::dense())?;
                    loss_selfcontrast(cx.tape, de.frame, gt, &de.features, &pr.features)?
                } else {
                    cx.tape.constant(Tensor::scalar(T::zero()))
                };
                let (l, p) = loss_overall(cx.tape, rec, ls, lugm, lsc, &w)?;
                let d = masks.map(|m| cx.tape.value(m).mean().as_f64());
                (l, p, Some((d, crate::losses::pooled_density(cx.tape, &masks))))
            }
        };
        if !parts.all_finite() {
            return Err(diverged(epoch, self.step, &batch.ids, &parts));
        }
        self.store.zero_grads();
        tape.backward(loss, &mut self.store)?;
        check_grads(&self.store)?;
        self.opt.step(&mut self.store, lr)?;
        let log = StepLog {
            phase: 2,
            epoch,
            step: self.step,
            lr,
            tau,
            parts,
            densities: densities.map(|d| d.0),
            pooled_density: densities.map(|d| d.1),
        };
        self.step += 1;
        Ok(log)
    }

    pub fn run(&mut self, ds: &Dataset, on_step: &mut dyn FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        self.check_labels(ds)?;
        let total = self.total_steps(ds);
        let mut logs = Vec::new();
        while self.step < total {
            let l = self.train_step(ds)?;
            on_step(&l);
            logs.push(l);
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_config_parsing() {
        let c = TrainConfig::from_kv("# desk\nphase1_epochs = 2\nlambda_s=0.5\nalphas=10,20,40\nhflip=false\n").unwrap();
        assert_eq!(c.phase1_epochs, 2);
        assert_eq!(c.weights.sparse, 0.5);
        assert_eq!(c.alphas(), [10.0, 20.0, 40.0]);
        assert!(!c.hflip);
        assert!(TrainConfig::from_kv("bogus=1").is_err());
        assert!(TrainConfig::from_kv("lr_end=1e-3").is_err());
        assert!(TrainConfig::from_kv("patch=40").is_err());
        assert!(TrainConfig::from_kv("tau_end=9").is_err());
        assert_eq!(TrainConfig::default().alphas(), [20.0, 40.0, 80.0]);
    }

    #[test]
    fn batch_indices_cover_each_epoch() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(3, 16, 4, 4, s).1).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 16, 4, 4, 5).0, 1);
    }

    #[test]
    fn crops_are_aligned_with_labels() {
        let ds = Dataset::Synthetic(SynthSpec {
            count: 2,
            height: 64,
            width: 64,
            ..Default::default()
        });
        let labels: Vec<MaskLabels> = (0..2)
            .map(|i| {
                let t: Triplet<f32> = ds.get(i).unwrap();
                let m = LabelPlane::from_tensor(t.motion_mask.as_ref().unwrap()).unwrap();
                MaskLabels {
                    sample_id: i as u64,
                    planes: [m.clone(), m.clone(), m],
                }
            })
            .collect();
        let map: HashMap<u64, MaskLabels> = labels.into_iter().map(|l| (l.sample_id, l)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..4 {
            let b: Batch<f32> = make_batch(&ds, &[0, 1], 32, true, &mut rng, Some(&map)).unwrap();
            // Where frames differ across time the (motion) label must be set.
            let l = &b.labels.as_ref().unwrap()[0];
            for n in 0..2 {
                for y in 0..32 {
                    for x in 0..32 {
                        if (0..3).any(|c| b.i0.at(n, c, y, x) != b.gt.at(n, c, y, x)) {
                            assert_eq!(l.at(n, 0, y, x), 1.0);
                        }
                    }
                }
            }
        }
        let mut missing = map.clone();
        missing.remove(&1);
        assert!(matches!(
            make_batch::<f32>(&ds, &[1], 32, false, &mut rng, Some(&missing)),
            Err(Error::MissingLabel(1))
        ));
    }
}

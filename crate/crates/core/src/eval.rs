//! Metrics, benchmarking and artifact emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::ParamStore;
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Triplet};
use crate::error::{Error, Result};
use crate::ppm::{normalize_map, write_ppm};
use crate::scalar::Scalar;
use crate::sparse::{flops_report, FlopsLedger};
use crate::tensor::Tensor;
use crate::uen::Uen;
use crate::vfi::{Branch, Exec, ForwardOpts, VfiNet};

pub const PSNR_CAP: f64 = 99.0;

/// Rebuild an interpolation network from a checkpoint. Every parameter must
/// be present, so a UEN checkpoint is rejected with a load error.
pub fn load_vfi<T: Scalar>(ck: &Checkpoint) -> Result<(VfiNet, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let net = VfiNet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), ck.net_config()?)?;
    ck.load_into(&mut store, VfiNet::PREFIX)?;
    Ok((net, store))
}

pub fn load_uen<T: Scalar>(ck: &Checkpoint) -> Result<(Uen, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let uen = Uen::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), ck.net_config()?)?;
    ck.load_into(&mut store, Uen::PREFIX)?;
    Ok((uen, store))
}

/// `10 log10(1 / MSE)` on `[0,1]` values, capped at 99 dB.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("psnr", &a.shape(), &b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR after rounding both images to 8 bits.
pub fn psnr_quantized<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let q = |t: &Tensor<T>| t.map(|v| T::lit((v.as_f64().clamp(0.0, 1.0) * 255.0).round() / 255.0));
    psnr(&q(a), &q(b))
}

/// Sums of per-pixel errors (mean absolute over channels) in five
/// equal-count bins of the ascending ranking; the remainder goes to the last bin.
pub fn error_interval_report<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<[f64; 5]> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim("error_interval_report", &pred.shape(), &gt.shape()));
    }
    let [n, c, h, w] = pred.shape();
    let mut errs = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let e: f64 = (0..c)
                    .map(|ci| (pred.at(ni, ci, y, x).as_f64() - gt.at(ni, ci, y, x).as_f64()).abs())
                    .sum();
                errs.push(e / c as f64);
            }
        }
    }
    Ok(interval_sums(errs))
}

pub fn interval_sums(mut errs: Vec<f64>) -> [f64; 5] {
    errs.sort_unstable_by(f64::total_cmp);
    let per = errs.len() / 5;
    let mut out = [0.0; 5];
    for (i, e) in errs.iter().enumerate() {
        out[(i / per.max(1)).min(4)] += e;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Dense,
    Pruned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub dataset: String,
    pub mode: BenchMode,
    pub samples: usize,
    pub psnr_mean: f64,
    pub flops_dense: u64,
    pub flops_active: u64,
    /// Over the gated layers only.
    pub reduction_percent: f64,
    pub wall_time_dense: Duration,
    pub wall_time_sparse: Option<Duration>,
    /// Mean hard-mask density of `P1, P2, P3` (pruned mode).
    pub mask_density: Option<[f64; 3]>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset            {}", self.dataset);
        let _ = writeln!(s, "mode               {:?}", self.mode);
        let _ = writeln!(s, "samples            {}", self.samples);
        let _ = writeln!(s, "psnr_mean_db       {:.4}", self.psnr_mean);
        let _ = writeln!(s, "flops_dense_g      {:.4}", self.flops_dense as f64 / 1e9);
        let _ = writeln!(s, "flops_active_g     {:.4}", self.flops_active as f64 / 1e9);
        let _ = writeln!(s, "reduction_percent  {:.2}", self.reduction_percent);
        let _ = writeln!(s, "time_dense_s       {:.4}", self.wall_time_dense.as_secs_f64());
        if let Some(t) = self.wall_time_sparse {
            let _ = writeln!(s, "time_sparse_s      {:.4}", t.as_secs_f64());
        }
        if let Some(d) = self.mask_density {
            let _ = writeln!(s, "mask_density       {:.4} {:.4} {:.4}", d[0], d[1], d[2]);
        }
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "dataset={} mode={} samples={} psnr_mean={:.6} flops_dense={} flops_active={} reduction_percent={:.4} wall_time_dense={:.6}",
            self.dataset,
            match self.mode {
                BenchMode::Dense => "dense",
                BenchMode::Pruned => "pruned",
            },
            self.samples,
            self.psnr_mean,
            self.flops_dense,
            self.flops_active,
            self.reduction_percent,
            self.wall_time_dense.as_secs_f64()
        );
        if let Some(t) = self.wall_time_sparse {
            let _ = write!(s, " wall_time_sparse={:.6}", t.as_secs_f64());
        }
        if let Some(d) = self.mask_density {
            let _ = write!(s, " density_p1={:.6} density_p2={:.6} density_p3={:.6}", d[0], d[1], d[2]);
        }
        s.push('\n');
        s
    }
}

pub fn inference_opts<T>(mode: BenchMode) -> ForwardOpts<T> {
    match mode {
        BenchMode::Dense => ForwardOpts::dense(),
        BenchMode::Pruned => ForwardOpts::pruned(Exec::Infer, 1.0, None),
    }
}

/// Traverse `ds` and accumulate PSNR, ledger FLOPs, timing and mask density.
/// The first sample is run once untimed as warm-up. `quantized` scores
/// PSNR after rounding both images to 8 bits.
pub fn benchmark<T: Scalar>(
    net: &VfiNet,
    store: &ParamStore<T>,
    ds: &Dataset,
    name: &str,
    mode: BenchMode,
    quantized: bool,
) -> Result<BenchReport> {
    let score = if quantized { psnr_quantized::<T> } else { psnr::<T> };
    if ds.is_empty() {
        return Err(Error::contract("benchmark", "empty dataset"));
    }
    let first: Triplet<T> = ds.get(0)?;
    net.predict(store, &first.i0, &first.i1, &ForwardOpts::dense())?;
    let opts = inference_opts(mode);
    let (mut psnr_sum, mut t_dense, mut t_sparse) = (0.0, Duration::ZERO, Duration::ZERO);
    let mut ledger = FlopsLedger::new();
    let mut dens = [0.0; 3];
    for i in 0..ds.len() {
        let t: Triplet<T> = ds.get(i)?;
        let clock = Instant::now();
        let dense = net.predict(store, &t.i0, &t.i1, &ForwardOpts::dense())?;
        t_dense += clock.elapsed();
        let p = if mode == BenchMode::Pruned {
            let clock = Instant::now();
            let p = net.predict(store, &t.i0, &t.i1, &opts)?;
            t_sparse += clock.elapsed();
            if let Some(m) = &p.masks {
                for k in 0..3 {
                    dens[k] += m[k].mean().as_f64();
                }
            }
            p
        } else {
            dense
        };
        psnr_sum += score(&p.frame, &t.gt)?;
        ledger.extend(p.ledger);
    }
    let s = flops_report(&ledger)?;
    let n = ds.len();
    Ok(BenchReport {
        dataset: name.to_string(),
        mode,
        samples: n,
        psnr_mean: psnr_sum / n as f64,
        flops_dense: s.total_dense / n as u64,
        flops_active: s.total_active / n as u64,
        reduction_percent: s.reduction_percent,
        wall_time_dense: t_dense,
        wall_time_sparse: (mode == BenchMode::Pruned).then_some(t_sparse),
        mask_density: (mode == BenchMode::Pruned).then(|| dens.map(|d| d / n as f64)),
    })
}

/// Write overlay, uncertainty maps, hard masks and frames for one triplet.
/// Returns the written paths.
pub fn emit_maps<T: Scalar>(
    net: &VfiNet,
    vfi_store: &ParamStore<T>,
    uen: &Uen,
    uen_store: &ParamStore<T>,
    t: &Triplet<T>,
    outdir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, img: &Tensor<T>| -> Result<()> {
        let p = outdir.join(name);
        write_ppm(&p, img)?;
        written.push(p);
        Ok(())
    };
    let item = |x: &Tensor<T>| x.item_at(0);
    put("overlay.ppm", &item(&t.i0.zip_map(&t.i1, |a, b| (a + b) * T::lit(0.5))?))?;
    let u = uen.predict_uncertainty(uen_store, &t.i0, &t.i1)?;
    for (k, uk) in u.iter().enumerate() {
        put(&format!("uncertainty{k}.pgm"), &normalize_map(&item(uk)))?;
    }
    let p = net.predict(vfi_store, &t.i0, &t.i1, &inference_opts(BenchMode::Pruned))?;
    let masks = p.masks.as_ref().expect("pruned prediction carries masks");
    for (j, m) in masks.iter().enumerate() {
        put(&format!("mask{}.pgm", j + 1), &item(m))?;
    }
    put("interpolated.ppm", &item(&p.frame))?;
    put("ground_truth.ppm", &item(&t.gt))?;
    Ok(written)
}

/// Summed error-interval reports of several models over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserveReport {
    pub models: Vec<(String, [f64; 5])>,
}

impl ObserveReport {
    /// Per-bin error reduction of model `large` relative to model `small`.
    pub fn reduction(&self, small: usize, large: usize) -> [f64; 5] {
        let (a, b) = (self.models[small].1, self.models[large].1);
        std::array::from_fn(|i| a[i] - b[i])
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16} {:>12} {:>12} {:>12} {:>12} {:>12}\n", "model", "q1", "q2", "q3", "q4", "q5");
        for (name, b) in &self.models {
            let _ = writeln!(
                s,
                "{:<16} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                name, b[0], b[1], b[2], b[3], b[4]
            );
        }
        if self.models.len() >= 2 {
            let r = self.reduction(0, self.models.len() - 1);
            let _ = writeln!(
                s,
                "{:<16} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                "reduction", r[0], r[1], r[2], r[3], r[4]
            );
        }
        s
    }
}

pub fn observe<T: Scalar>(
    models: &[(String, &VfiNet, &ParamStore<T>)],
    ds: &Dataset,
    branch: Branch,
) -> Result<ObserveReport> {
    let opts = match branch {
        Branch::Dense => inference_opts(BenchMode::Dense),
        Branch::Pruned => inference_opts(BenchMode::Pruned),
    };
    let mut out = Vec::new();
    for (name, net, store) in models {
        let mut acc = [0.0; 5];
        for i in 0..ds.len() {
            let t: Triplet<T> = ds.get(i)?;
            let p = net.predict(*store, &t.i0, &t.i1, &opts)?;
            let r = error_interval_report(&p.frame, &t.gt)?;
            for k in 0..5 {
                acc[k] += r[k];
            }
        }
        out.push((name.clone(), acc));
    }
    Ok(ObserveReport { models: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::full([1, 3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 10.0 / 255.0);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0 * (255.0f64 / 10.0).log10()).abs() < 1e-9);
        assert!((p - 28.1308).abs() < 1e-3);
        assert_eq!(psnr(&b, &a).unwrap(), p);
        assert!(psnr(&a, &Tensor::zeros([1, 3, 4, 2])).is_err());
    }

    #[test]
    fn interval_examples() {
        assert_eq!(interval_sums((1..=10).map(|v| v as f64).collect()), [3.0, 7.0, 11.0, 15.0, 19.0]);
        assert_eq!(interval_sums(vec![0.0; 13]), [0.0; 5]);
        // 12 pixels: bins of 2, remainder in the last bin.
        let r = interval_sums((1..=12).map(|v| v as f64).collect());
        assert_eq!(r, [3.0, 7.0, 11.0, 15.0, 9.0 + 10.0 + 11.0 + 12.0]);
        let pred = Tensor::<f64>::from_fn([1, 3, 2, 5], |[_, _, y, x]| (y * 5 + x + 1) as f64);
        let gt = Tensor::<f64>::zeros([1, 3, 2, 5]);
        assert_eq!(error_interval_report(&pred, &gt).unwrap(), [3.0, 7.0, 11.0, 15.0, 19.0]);
    }
}

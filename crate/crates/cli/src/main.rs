//! `ugsp`: train, label, benchmark and run the pruned interpolation network.
//!
//! Failures print a single line `error[<category>]: <message>` on stderr and
//! exit with status 1; usage errors use the category `usage` and status 2.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use ugsp::checkpoint::Checkpoint;
use ugsp::data::{center_crop16, load_image};
use ugsp::eval::{benchmark, emit_maps, inference_opts, load_uen, load_vfi, observe, BenchMode};
use ugsp::ppm::write_ppm;
use ugsp::sparse::flops_report;
use ugsp::trainer::{StepLog, TrainConfig, UenTrainer, VfiTrainer};
use ugsp::uen::{load_labels, save_labels};
use ugsp::vfi::{Branch, ForwardOpts, VfiNet};
use ugsp::{Error, ParamStore, Result, Tensor};

#[derive(Parser)]
#[command(name = "ugsp", version, about = "Uncertainty-guided spatially pruned frame interpolation")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable and applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for batch parallelism (benchmark defaults to 1).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Single-threaded execution with a fixed reduction order.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dense,
    Pruned,
}

impl From<Mode> for BenchMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Dense => BenchMode::Dense,
            Mode::Pruned => BenchMode::Pruned,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Phase 1: train the uncertainty estimation network.
    TrainUen {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also append the per-step log to this file.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Save a checkpoint every N steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        save_every: u64,
    },
    /// Threshold UEN uncertainty into a mask-label cache.
    GenLabels {
        #[arg(long)]
        uen: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Phase 2: train the interpolation network with pruning.
    TrainVfi {
        /// Label cache from gen-labels (not needed for dense_only or lambda_ugm = 0).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        save_every: u64,
    },
    /// Interpolate the midpoint between two frames (written as PPM).
    Interpolate {
        i0: PathBuf,
        i1: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "pruned")]
        mode: Mode,
    },
    /// PSNR, FLOPs, timing and mask density over the configured dataset.
    Benchmark {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "pruned")]
        mode: Mode,
        /// Dataset label used in the report.
        #[arg(long, default_value = "dataset")]
        name: String,
        /// Score PSNR on 8-bit quantised images.
        #[arg(long)]
        quantized: bool,
        /// Write the key=value report here as well.
        #[arg(long)]
        kv: Option<PathBuf>,
    },
    /// Per-layer FLOPs of one dense forward pass at a given resolution.
    Flops {
        /// Take the architecture from this checkpoint instead of the config.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 448)]
        width: usize,
        /// Export the ledger as key=value lines.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Error-interval report over several model variants, smallest first.
    Observe {
        #[arg(long = "model", required = true, num_args = 1..)]
        models: Vec<PathBuf>,
        /// Evaluate the pruned branch instead of the dense one.
        #[arg(long)]
        pruned: bool,
    },
    /// Write uncertainty maps, masks and frames for one dataset sample.
    EmitMaps {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        uen: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        outdir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.apply_kv(&text)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads(cli: &Cli, default: Option<usize>) -> Result<()> {
    let n = if cli.deterministic { Some(1) } else { cli.threads.or(default) };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

struct StepSink {
    file: Option<BufWriter<File>>,
}

impl StepSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(BufWriter::new(
                File::options().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?,
            )),
            None => None,
        };
        Ok(StepSink { file })
    }

    fn put(&mut self, l: &StepLog) -> Result<()> {
        println!("{l}");
        if let Some(f) = &mut self.file {
            writeln!(f, "{l}").map_err(|e| Error::io("<log>", e))?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io("<log>", e))?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::TrainUen {
            out,
            resume,
            log,
            save_every,
        } => {
            let cfg = config(&cli)?;
            threads(&cli, None)?;
            let ds = cfg.dataset()?;
            let mut t = match resume {
                Some(p) => UenTrainer::<f32>::from_checkpoint(cfg, &Checkpoint::load(p)?)?,
                None => UenTrainer::<f32>::new(cfg)?,
            };
            let mut sink = StepSink::open(log.as_deref())?;
            let total = t.total_steps(&ds);
            while t.step < total {
                let l = t.train_step(&ds)?;
                sink.put(&l)?;
                if *save_every > 0 && t.step % save_every == 0 {
                    t.checkpoint().save(out)?;
                }
            }
            sink.finish()?;
            t.checkpoint().save(out)?;
            info!("wrote {}", out.display());
        }
        Cmd::GenLabels { uen, out } => {
            let cfg = config(&cli)?;
            threads(&cli, None)?;
            let ds = cfg.dataset()?;
            let t = UenTrainer::<f32>::from_checkpoint(cfg.clone(), &Checkpoint::load(uen)?)?;
            let alphas = cfg.alphas();
            let labels = t.labels(&ds, alphas)?;
            save_labels(out, &labels)?;
            let n = labels.len().max(1) as f64;
            let dens: Vec<f64> = (0..3)
                .map(|k| labels.iter().map(|l| l.planes[k].density()).sum::<f64>() / n)
                .collect();
            println!(
                "samples={} alphas={},{},{} density={:.4},{:.4},{:.4}",
                labels.len(),
                alphas[0],
                alphas[1],
                alphas[2],
                dens[0],
                dens[1],
                dens[2]
            );
        }
        Cmd::TrainVfi {
            labels,
            out,
            resume,
            log,
            save_every,
        } => {
            let cfg = config(&cli)?;
            threads(&cli, None)?;
            let ds = cfg.dataset()?;
            let labels = labels.as_deref().map(load_labels).transpose()?;
            let mut t = match resume {
                Some(p) => VfiTrainer::<f32>::from_checkpoint(cfg, labels, &Checkpoint::load(p)?)?,
                None => VfiTrainer::<f32>::new(cfg, labels)?,
            };
            t.check_labels(&ds)?;
            let mut sink = StepSink::open(log.as_deref())?;
            let total = t.total_steps(&ds);
            while t.step < total {
                let l = t.train_step(&ds)?;
                sink.put(&l)?;
                if *save_every > 0 && t.step % save_every == 0 {
                    t.checkpoint().save(out)?;
                }
            }
            sink.finish()?;
            t.checkpoint().save(out)?;
            info!("wrote {}", out.display());
        }
        Cmd::Interpolate {
            i0,
            i1,
            out,
            model,
            mode,
        } => {
            threads(&cli, None)?;
            let (net, store) = load_vfi::<f32>(&Checkpoint::load(model)?)?;
            let a = fit16(load_image::<f32>(i0)?, i0)?;
            let b = fit16(load_image::<f32>(i1)?, i1)?;
            if a.shape() != b.shape() {
                return Err(Error::dim("interpolate", &a.shape(), &b.shape()));
            }
            let p = net.predict(&store, &a, &b, &inference_opts((*mode).into()))?;
            write_ppm(out, &p.frame)?;
            let s = flops_report(&p.ledger)?;
            println!(
                "wrote {} flops_dense={} flops_active={} reduction_percent={:.4}",
                out.display(),
                s.total_dense,
                s.total_active,
                s.reduction_percent
            );
        }
        Cmd::Benchmark {
            model,
            mode,
            name,
            quantized,
            kv,
        } => {
            let cfg = config(&cli)?;
            threads(&cli, Some(1))?;
            let (net, store) = load_vfi::<f32>(&Checkpoint::load(model)?)?;
            let r = benchmark(&net, &store, &cfg.dataset()?, name, (*mode).into(), *quantized)?;
            print!("{}", r.to_text());
            if let Some(p) = kv {
                std::fs::write(p, r.to_kv()).map_err(|e| Error::io(p, e))?;
            }
        }
        Cmd::Flops {
            model,
            height,
            width,
            ledger,
        } => {
            threads(&cli, None)?;
            let (net, store): (VfiNet, ParamStore<f32>) = match model {
                Some(p) => load_vfi(&Checkpoint::load(p)?)?,
                None => {
                    let cfg = config(&cli)?;
                    load_fresh(cfg)?
                }
            };
            let img = Tensor::<f32>::zeros([1, 3, *height, *width]);
            let p = net.predict(&store, &img, &img, &ForwardOpts::dense())?;
            let s = flops_report(&p.ledger)?;
            print!("{}", p.ledger.to_text());
            println!(
                "total_dense={} gated_dense={} ungated={} gflops={:.3}",
                s.total_dense,
                s.gated_dense,
                s.ungated,
                s.total_dense as f64 / 1e9
            );
            if let Some(path) = ledger {
                std::fs::write(path, p.ledger.to_kv()).map_err(|e| Error::io(path, e))?;
            }
        }
        Cmd::Observe { models, pruned } => {
            let cfg = config(&cli)?;
            threads(&cli, None)?;
            let loaded: Vec<(String, VfiNet, ParamStore<f32>)> = models
                .iter()
                .map(|p| {
                    let (n, s) = load_vfi(&Checkpoint::load(p)?)?;
                    let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into());
                    Ok((name, n, s))
                })
                .collect::<Result<_>>()?;
            let refs: Vec<_> = loaded.iter().map(|(n, net, s)| (n.clone(), net, s)).collect();
            let branch = if *pruned { Branch::Pruned } else { Branch::Dense };
            print!("{}", observe(&refs, &cfg.dataset()?, branch)?.to_text());
        }
        Cmd::EmitMaps {
            model,
            uen,
            sample,
            outdir,
        } => {
            let cfg = config(&cli)?;
            threads(&cli, None)?;
            let ds = cfg.dataset()?;
            if *sample >= ds.len() {
                return Err(Error::Config(format!("sample {sample} out of range (dataset has {})", ds.len())));
            }
            let (net, vs) = load_vfi::<f32>(&Checkpoint::load(model)?)?;
            let (u, us) = load_uen::<f32>(&Checkpoint::load(uen)?)?;
            for p in emit_maps(&net, &vs, &u, &us, &ds.get(*sample)?, outdir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Centre-crop to a multiple of 16, warning when pixels are dropped.
fn fit16(img: Tensor<f32>, path: &Path) -> Result<Tensor<f32>> {
    let c = center_crop16(&img)?;
    if c.shape() != img.shape() {
        warn!("{}: cropped {}x{} to {}x{}", path.display(), img.h(), img.w(), c.h(), c.w());
    }
    Ok(c)
}

/// Randomly initialised network for architecture-only queries.
fn load_fresh(cfg: TrainConfig) -> Result<(VfiNet, ParamStore<f32>)> {
    let t = VfiTrainer::<f32>::new(
        TrainConfig {
            dense_only: true,
            ..cfg
        },
        None,
    )?;
    Ok((t.net, t.store))
}


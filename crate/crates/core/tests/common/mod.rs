//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ugsp::autograd::check::{grad_check, GradCheckConfig};
use ugsp::losses::{loss_overall, loss_rec, loss_selfcontrast, loss_sparse, loss_ugm, LossWeights};
use ugsp::nn::Ctx;
use ugsp::sparse::{masked_conv_train, FlopsLedger};
use ugsp::uen::loss_su;
use ugsp::vfi::{Exec, ForwardOpts, NetConfig, VfiNet};
use ugsp::vision::{bilinear_resize, gumbel_softmax, laplacian_l1, resize_flow, Ratio};
use ugsp::{ParamStore, Result, Shape, Tape, Tensor, Var};

pub const OP_TOL: f64 = 1e-4;
pub const E2E_TOL: f64 = 1e-3;

/// Central differences in f64. The step is small because the network is
/// piecewise smooth (PReLU, abs, clamp, bilinear cells): a bias perturbation
/// moves thousands of pre-activations and must not carry any across a kink.
pub fn fd_config(samples: usize, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-7,
        samples_per_param: samples,
        floor: 1e-6,
        seed,
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<(Shape, f64, f64)>,
    build: Build,
}

fn case(name: &'static str, inputs: Vec<(Shape, f64, f64)>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn u(shape: Shape) -> (Shape, f64, f64) {
    (shape, -1.0, 1.0)
}

/// Every differentiable operator, each reduced to a scalar through a fixed
/// random projection so that all output elements contribute.
fn op_cases() -> Vec<OpCase> {
    let x = [2, 3, 6, 6];
    vec![
        case("conv2d_3x3_s1", vec![u(x), u([4, 3, 3, 3]), u([1, 1, 1, 4])], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        case("conv2d_3x3_s2", vec![u(x), u([4, 3, 3, 3]), u([1, 1, 1, 4])], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        case("conv2d_1x1", vec![u(x), u([5, 3, 1, 1]), u([1, 1, 1, 5])], |t, v| t.conv2d(v[0], v[1], v[2], 1, 0)),
        case("deconv_4x4_s2", vec![u([1, 3, 4, 5]), u([3, 2, 4, 4]), u([1, 1, 1, 2])], |t, v| {
            t.deconv(v[0], v[1], v[2], 2, 1)
        }),
        case(
            "masked_conv_train",
            vec![u(x), u([4, 3, 3, 3]), u([1, 1, 1, 4]), ([2, 1, 6, 6], 0.0, 1.0)],
            |t, v| masked_conv_train(t, v[0], v[1], v[2], 1, 1, v[3]),
        ),
        case("prelu", vec![u(x), ([1, 1, 1, 3], 0.05, 0.5)], |t, v| t.prelu(v[0], v[1])),
        case("elu", vec![u(x)], |t, v| t.elu(v[0])),
        case("sigmoid", vec![(x, -4.0, 4.0)], |t, v| t.sigmoid(v[0])),
        case("exp", vec![u(x)], |t, v| t.exp(v[0])),
        case("abs", vec![u(x)], |t, v| t.abs(v[0])),
        case("clamp", vec![(x, -2.0, 2.0)], |t, v| t.clamp(v[0], -1.0, 1.0)),
        case("scale", vec![u(x)], |t, v| t.scale(v[0], -2.5)),
        case("add_scalar", vec![u(x)], |t, v| t.add_scalar(v[0], 0.3)),
        case("add", vec![u(x), u(x)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![u(x), u(x)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![u(x), u(x)], |t, v| t.mul(v[0], v[1])),
        case("mul_mask", vec![u(x), ([2, 1, 6, 6], 0.0, 1.0)], |t, v| t.mul_mask(v[0], v[1])),
        case("concat", vec![u(x), u([2, 2, 6, 6])], |t, v| t.concat(&[v[0], v[1]])),
        case("slice_channels", vec![u(x)], |t, v| t.slice_channels(v[0], 1, 2)),
        case("mean_channels", vec![u(x)], |t, v| t.mean_channels(v[0])),
        case("sum_per_item", vec![u(x)], |t, v| t.sum_per_item(v[0])),
        case("sum", vec![u(x)], |t, v| t.sum(v[0])),
        case("mean", vec![u(x)], |t, v| t.mean(v[0])),
        case("warp", vec![(x, 0.0, 1.0), ([2, 2, 6, 6], -1.7, 1.7)], |t, v| t.warp(v[0], v[1])),
        case("resize_up", vec![u([1, 2, 3, 4])], |t, v| bilinear_resize(t, v[0], Ratio::up(2))),
        case("resize_down", vec![u([1, 2, 8, 8])], |t, v| bilinear_resize(t, v[0], Ratio::down(2))),
        case("resize_flow", vec![u([1, 2, 3, 4])], |t, v| resize_flow(t, v[0], Ratio::up(2))),
        case("upsample_nearest", vec![u([1, 2, 3, 4])], |t, v| t.upsample_nearest(v[0], 2)),
        case("avg_pool", vec![u([1, 2, 8, 8])], |t, v| t.avg_pool(v[0], 4)),
        case("blur_down", vec![u([1, 2, 8, 8])], |t, v| t.blur_down(v[0])),
        case("census", vec![(x, 0.0, 1.0), (x, 0.0, 1.0)], |t, v| t.census(v[0], v[1])),
        case("gumbel_softmax_soft", vec![([2, 2, 5, 5], -2.0, 2.0)], |t, v| gumbel_softmax(t, v[0], 0.7, Some(3), false)),
        case("laplacian_l1", vec![(x, 0.0, 1.0), (x, 0.0, 1.0)], |t, v| laplacian_l1(t, v[0], v[1], 2)),
        case("loss_rec", vec![([1, 3, 16, 16], 0.0, 1.0), ([1, 3, 16, 16], 0.0, 1.0)], |t, v| loss_rec(t, v[0], v[1])),
        case(
            "loss_su",
            vec![(x, 0.0, 1.0), (x, 0.0, 1.0), ([2, 1, 6, 6], -2.0, 1.0)],
            |t, v| loss_su(t, &[v[0]], v[1], &[v[2]]),
        ),
        case(
            "loss_sparse",
            vec![([2, 1, 8, 8], 0.0, 1.0), ([2, 1, 4, 4], 0.0, 1.0), ([2, 1, 2, 2], 0.0, 1.0)],
            |t, v| loss_sparse(t, &[v[0], v[1], v[2]], 0.9),
        ),
        case(
            "loss_ugm",
            vec![([1, 1, 8, 8], 0.0, 1.0), ([1, 1, 4, 4], 0.0, 1.0), ([1, 1, 2, 2], 0.0, 1.0)],
            |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let labels = [0, 1, 2].map(|_| {
                    let l = Tensor::from_fn([1, 1, 16, 16], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
                    t.constant(l)
                });
                loss_ugm(t, &labels, &[v[0], v[1], v[2]])
            },
        ),
        case(
            "loss_selfcontrast",
            vec![([1, 3, 16, 16], 0.0, 1.0), ([1, 3, 16, 16], 0.0, 1.0), u([1, 4, 4, 4]), u([1, 4, 4, 4])],
            |t, v| loss_selfcontrast(t, v[0], v[1], &[v[2]], &[v[3]]),
        ),
    ]
}

/// Run the per-op suite; returns `(name, max relative error)` per operator.
pub fn op_suite() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (ci, c) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + ci as u64);
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<_> = c
            .inputs
            .iter()
            .enumerate()
            .map(|(i, &(s, lo, hi))| store.add(&format!("{}.in{i}", c.name), Tensor::uniform(s, lo, hi, &mut rng)))
            .collect::<Result<_>>()?;
        let probe = std::cell::RefCell::new(None::<Tensor<f64>>);
        let build = &c.build;
        let report = grad_check(&mut store, &fd_config(24, ci as u64), |tape, st| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(st, id)).collect();
            let y = build(tape, &vars)?;
            let shape = tape.shape(y);
            let r = probe
                .borrow_mut()
                .get_or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(7);
                    Tensor::uniform(shape, 0.5, 1.5, &mut rng)
                })
                .clone();
            let r = tape.constant(r);
            let p = tape.mul(y, r)?;
            tape.sum(p)
        })?;
        out.push((c.name.to_string(), report.max_rel_err()));
    }
    Ok(out)
}

/// Finite-difference check of the complete overall loss (pruned branch with
/// soft Gumbel masks, dense branch, all four terms) at 32x32.
pub fn end_to_end_check() -> Result<f64> {
    let cfg = NetConfig {
        width_mult: 0.125,
        sparse_convs: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let net = VfiNet::new(&mut store, &mut rng, cfg)?;
    // Move zero-initialised heads off zero so every path carries gradient.
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let shape = [1, 3, 32, 32];
    let i0 = Tensor::<f64>::uniform(shape, 0.1, 0.9, &mut rng);
    let i1 = Tensor::<f64>::uniform(shape, 0.1, 0.9, &mut rng);
    let gt = Tensor::<f64>::uniform(shape, 0.1, 0.9, &mut rng);
    let labels: [Tensor<f64>; 3] =
        std::array::from_fn(|_| Tensor::from_fn([1, 1, 32, 32], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }));
    let w = LossWeights {
        sparse: 0.3,
        ugm: 0.2,
        self_contrast: 0.5,
        target: 0.5,
    };
    let report = grad_check(&mut store, &fd_config(3, 1), |tape, st| {
        let mut ledger = FlopsLedger::new();
        let mut cx = Ctx::new(tape, st, &mut ledger);
        let a = cx.tape.constant(i0.clone());
        let b = cx.tape.constant(i1.clone());
        let g = cx.tape.constant(gt.clone());
        let pr = net.forward(&mut cx, a, b, &ForwardOpts::pruned(Exec::Train, 0.8, Some(42)))?;
        let de = net.forward(&mut cx, a, b, &ForwardOpts::dense())?;
        let masks = pr.masks.expect("pruned masks");
        let rec = loss_rec(cx.tape, pr.frame, g)?;
        let ls = loss_sparse(cx.tape, &masks, w.target)?;
        let lv = labels.clone().map(|l| cx.tape.constant(l));
        let lugm = loss_ugm(cx.tape, &lv, &masks)?;
        let lsc = loss_selfcontrast(cx.tape, de.frame, g, &de.features, &pr.features)?;
        Ok(loss_overall(cx.tape, rec, ls, lugm, lsc, &w)?.0)
    })?;
    if std::env::var_os("UGSP_GRAD_DEBUG").is_some() {
        let mut e = report.entries.clone();
        e.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        for x in e.iter().take(12) {
            eprintln!("{} [{}] a={:e} n={:e} rel={:e}", x.param, x.index, x.analytic, x.numeric, x.rel_err);
        }
    }
    Ok(report.max_rel_err())
}

/// One named check: measured value against its bound.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound,
        }
    }

    pub fn ok(&self) -> bool {
        self.value.abs() <= self.bound
    }
}

fn scalar_loss(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::inference();
    let v = f(&mut tape)?;
    Ok(tape.scalar(v))
}

/// Closed-form identities of the losses.
pub fn loss_identities() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut out = Vec::new();
    let img = Tensor::<f64>::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);

    let su0 = scalar_loss(|t| {
        let f = t.constant(img.clone());
        let g = t.constant(img.clone());
        let u = t.constant(Tensor::zeros([2, 1, 32, 32]));
        loss_su(t, &[f], g, &[u])
    })?;
    out.push(Check::new("loss_su(e=0, U=0)", su0, 0.0));

    // d/dU [exp(-U) e + 2U] vanishes at U = ln(e / 2).
    for e in [0.1, 0.4, 1.0] {
        let mut store = ParamStore::<f64>::new();
        let uid = store.add("u", Tensor::full([1, 1, 4, 4], (e / 2.0f64).ln()))?;
        let mut tape = Tape::new();
        let gt = Tensor::<f64>::full([1, 3, 4, 4], 0.25);
        let f = tape.constant(gt.map(|v| v + e));
        let g = tape.constant(gt);
        let u = tape.param(&store, uid);
        let l = loss_su(&mut tape, &[f], g, &[u])?;
        tape.backward(l, &mut store)?;
        // Per-pixel derivative: the mean divides by the 16 positions.
        let worst = store.get(uid).grad.data().iter().fold(0.0f64, |m, g| m.max((g * 16.0).abs()));
        out.push(Check::new(format!("d loss_su / dU at U=ln(e/2), e={e}"), worst, 1e-6));
    }

    let rec = scalar_loss(|t| {
        let a = t.constant(img.clone());
        let b = t.constant(img.clone());
        loss_rec(t, a, b)
    })?;
    out.push(Check::new("loss_rec(x, x)", rec, 0.0));

    let labels: [Tensor<f64>; 3] =
        std::array::from_fn(|_| Tensor::from_fn([2, 1, 32, 32], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }));
    let ugm = scalar_loss(|t| {
        let lv = labels.clone().map(|l| t.constant(l));
        let ms = [t.avg_pool(lv[0], 2)?, t.avg_pool(lv[1], 4)?, t.avg_pool(lv[2], 8)?];
        loss_ugm(t, &lv, &ms)
    })?;
    out.push(Check::new("loss_ugm(P, pooled labels)", ugm, 0.0));

    let sp = scalar_loss(|t| {
        let ms = [16, 8, 4].map(|s| t.constant(Tensor::full([2, 1, s, s], 0.35)));
        loss_sparse(t, &ms, 0.35)
    })?;
    out.push(Check::new("loss_sparse(density = target)", sp, 1e-12));

    let feats: Vec<Tensor<f64>> = (0..3).map(|k| Tensor::uniform([2, 4, 16 >> k, 16 >> k], -1.0, 1.0, &mut rng)).collect();
    let sc = scalar_loss(|t| {
        let d = t.constant(img.clone());
        let g = t.constant(img.clone());
        let fa: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
        let fb: Vec<Var> = feats.iter().map(|f| t.constant(f.clone())).collect();
        loss_selfcontrast(t, d, g, &fa, &fb)
    })?;
    out.push(Check::new("loss_selfcontrast(gt, equal features)", sc, 0.0));

    let b = Tensor::<f64>::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let c0 = scalar_loss(|t| {
        let x = t.constant(img.clone());
        let y = t.constant(b.clone());
        t.census(x, y)
    })?;
    let c1 = scalar_loss(|t| {
        let x = t.constant(img.map(|v| v + 0.37));
        let y = t.constant(b.map(|v| v - 0.21));
        t.census(x, y)
    })?;
    out.push(Check::new("census invariance to additive constants", c1 - c0, 1e-6));
    Ok(out)
}

/// Save/load round-trips of the checkpoint, the label cache and PPM/PGM.
/// Returns named checks whose value is the observed deviation.
pub fn format_round_trips(dir: &std::path::Path) -> Result<Vec<Check>> {
    use ugsp::checkpoint::Checkpoint;
    use ugsp::ppm::{read_ppm, write_ppm};
    use ugsp::uen::{gen_mask_labels, load_labels, save_labels};

    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f32>::new();
    let net = VfiNet::new(
        &mut store,
        &mut rng,
        NetConfig {
            width_mult: 0.25,
            sparse_convs: 2,
        },
    )?;
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-1e-3..1e-3);
        }
    }
    let path = dir.join("model.ckpt");
    Checkpoint::from_store(&store, &net.cfg()).save(&path)?;
    let ck = Checkpoint::load(&path)?;
    let mut back = ParamStore::<f32>::new();
    let net2 = VfiNet::new(&mut back, &mut ChaCha8Rng::seed_from_u64(99), ck.net_config()?)?;
    ck.load_into(&mut back, VfiNet::PREFIX)?;
    let mismatched = store
        .iter()
        .zip(back.iter())
        .map(|((_, a), (_, b))| {
            a.value
                .data()
                .iter()
                .zip(b.value.data())
                .filter(|(x, y)| x.to_bits() != y.to_bits())
                .count()
        })
        .sum::<usize>();
    out.push(Check::new("checkpoint: mismatched parameter bits", mismatched as f64, 0.0));
    out.push(Check::new(
        "checkpoint: config restored",
        (net2.cfg() != net.cfg()) as u8 as f64,
        0.0,
    ));
    let resaved = dir.join("model2.ckpt");
    Checkpoint::from_store(&back, &net2.cfg()).save(&resaved)?;
    let same = std::fs::read(&path).map_err(|e| ugsp::Error::io(&path, e))?
        == std::fs::read(&resaved).map_err(|e| ugsp::Error::io(&resaved, e))?;
    out.push(Check::new("checkpoint: re-saved file identical", (!same) as u8 as f64, 0.0));

    let u: [Tensor<f32>; 3] = std::array::from_fn(|_| Tensor::uniform([4, 1, 24, 40], -2.0, 2.0, &mut rng));
    let labels = gen_mask_labels(&u, [20.0, 40.0, 80.0], &[3, 1, 4, 1_000_000_007])?;
    let lpath = dir.join("labels.bin");
    save_labels(&lpath, &labels)?;
    let lback = load_labels(&lpath)?;
    out.push(Check::new("label cache: records differing", (lback != labels) as u8 as f64, 0.0));

    let img = Tensor::<f32>::uniform([1, 3, 17, 23], 0.0, 1.0, &mut rng);
    let ppath = dir.join("img.ppm");
    write_ppm(&ppath, &img)?;
    let pback: Tensor<f32> = read_ppm(&ppath)?;
    out.push(Check::new("ppm: max deviation (levels of 1/255)", pback.max_abs_diff(&img) as f64 * 255.0, 1.0));
    let map = Tensor::<f32>::uniform([1, 1, 9, 31], 0.0, 1.0, &mut rng);
    let gpath = dir.join("map.pgm");
    write_ppm(&gpath, &map)?;
    let gback: Tensor<f32> = read_ppm(&gpath)?;
    out.push(Check::new("pgm: max deviation (levels of 1/255)", gback.max_abs_diff(&map) as f64 * 255.0, 1.0));
    write_ppm(&gpath, &gback)?;
    let again: Tensor<f32> = read_ppm(&gpath)?;
    out.push(Check::new("pgm: second round-trip drift", again.max_abs_diff(&gback) as f64, 0.0));
    Ok(out)
}

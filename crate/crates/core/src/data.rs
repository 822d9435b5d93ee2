//! Frame triplets: the synthetic generator and on-disk folders.
//!
//! A triplet is `(I0, I_gt, I1)` with `I_gt` the midpoint frame. On disk a
//! sample is a folder holding `frame0`, `frame1` (the midpoint) and `frame2`,
//! each as `.ppm` or `.png`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ppm::read_ppm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vfi::mix_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet<T> {
    pub i0: Tensor<T>,
    pub gt: Tensor<T>,
    pub i1: Tensor<T>,
    pub sample_id: u64,
    /// Pixels covered by a shape in any of the three frames (synthetic only).
    pub motion_mask: Option<Tensor<T>>,
}

impl<T: Scalar> Triplet<T> {
    pub fn height(&self) -> usize {
        self.i0.h()
    }

    pub fn width(&self) -> usize {
        self.i0.w()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Triplet {
            i0: self.i0.crop(y0, x0, h, w),
            gt: self.gt.crop(y0, x0, h, w),
            i1: self.i1.crop(y0, x0, h, w),
            sample_id: self.sample_id,
            motion_mask: self.motion_mask.as_ref().map(|m| m.crop(y0, x0, h, w)),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Triplet {
            i0: self.i0.flip_horizontal(),
            gt: self.gt.flip_horizontal(),
            i1: self.i1.flip_horizontal(),
            sample_id: self.sample_id,
            motion_mask: self.motion_mask.as_ref().map(|m| m.flip_horizontal()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Rect { hw: f64, hh: f64 },
    Disk { r: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: Kind,
    c0: (f64, f64),
    disp: (f64, f64),
    color: [f64; 3],
    freq: f64,
    angle: f64,
}

impl Shape {
    fn center(&self, t: f64) -> (f64, f64) {
        (self.c0.0 + t * self.disp.0, self.c0.1 + t * self.disp.1)
    }

    /// Anti-aliased coverage in `[0,1]` and the local texture factor.
    fn sample(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        let (cx, cy) = self.center(t);
        let (px, py) = (x - cx, y - cy);
        let sd = match self.kind {
            Kind::Rect { hw, hh } => (px.abs() - hw).max(py.abs() - hh),
            Kind::Disk { r } => (px * px + py * py).sqrt() - r,
        };
        let cov = (0.5 - sd).clamp(0.0, 1.0);
        let tex = 0.75 + 0.25 * (self.freq * (px * self.angle.cos() + py * self.angle.sin())).sin();
        (cov, tex)
    }
}

/// Binomial `[1,4,6,4,1]/16` blur of a single plane, replicate border.
fn blur_plane(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5).map(|k| K[k] * p[y * w + at(x as isize + k as isize - 2, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5).map(|k| K[k] * tmp[at(y as isize + k as isize - 2, h) * w + x]).sum();
        }
    }
    out
}

/// Amplitude of the blurred fine noise in the background.
const FINE_TEXTURE: f64 = 0.1;

/// Per-seed textured background: coarse value noise plus blurred fine noise.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> [Vec<f64>; 3] {
    let cell = 16.0;
    let (gh, gw) = ((h as f64 / cell) as usize + 2, (w as f64 / cell) as usize + 2);
    std::array::from_fn(|_| {
        let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
        let fine: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let fine = blur_plane(&fine, h, w);
        let mut plane = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (gy, gx) = (y as f64 / cell, x as f64 / cell);
                let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
                let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
                let g = |yy: usize, xx: usize| grid[yy * gw + xx];
                let coarse = (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x0 + 1))
                    + fy * ((1.0 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1));
                plane[y * w + x] = (0.2 + 0.6 * coarse + FINE_TEXTURE * fine[y * w + x]).clamp(0.0, 1.0);
            }
        }
        plane
    })
}

/// Deterministic synthetic triplet: textured background and `n_shapes`
/// anti-aliased rectangles or disks moving linearly by at most `max_disp`
/// pixels per axis between `I0` and `I1`; `I_gt` is rendered at `t = 0.5`.
pub fn synth_triplet<T: Scalar>(
    seed: u64,
    h: usize,
    w: usize,
    n_shapes: usize,
    max_disp: f64,
) -> Result<Triplet<T>> {
    if !(1..=8).contains(&n_shapes) {
        return Err(Error::contract("synth_triplet", format!("n_shapes {n_shapes} not in 1..=8")));
    }
    if !(0.0..=h as f64 / 8.0).contains(&max_disp) {
        return Err(Error::contract("synth_triplet", format!("max_disp {max_disp} not in [0, H/8]")));
    }
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::contract("synth_triplet", format!("{h}x{w} not divisible by 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, h, w);
    let side = h.min(w) as f64;
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let size = rng.gen_range(side / 10.0..side / 5.0);
            let kind = if rng.gen_bool(0.5) {
                Kind::Disk { r: size }
            } else {
                Kind::Rect {
                    hw: size,
                    hh: rng.gen_range(0.5..1.0) * size,
                }
            };
            let mut d = || {
                if max_disp > 0.0 {
                    rng.gen_range(-max_disp..=max_disp)
                } else {
                    0.0
                }
            };
            let disp = (d(), d());
            Shape {
                kind,
                c0: (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)),
                disp,
                color: [rng.gen(), rng.gen(), rng.gen()],
                freq: rng.gen_range(0.3..1.2),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();

    let mut motion = Tensor::zeros([1, 1, h, w]);
    let mut render = |t: f64| {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
            let mut v = bg[c][y * w + x];
            for s in &shapes {
                let (cov, tex) = s.sample(x as f64, y as f64, t);
                if cov > 0.0 {
                    v = v * (1.0 - cov) + s.color[c] * tex * cov;
                    motion.set(0, 0, y, x, T::one());
                }
            }
            T::lit(v)
        })
    };
    let (i0, gt, i1) = (render(0.0), render(0.5), render(1.0));
    Ok(Triplet {
        i0,
        gt,
        i1,
        sample_id: seed,
        motion_mask: Some(motion),
    })
}

/// Parameters of a deterministic synthetic dataset; sample `i` is generated
/// from `mix_seed(seed, i)` on demand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    pub max_disp: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            count: 64,
            height: 64,
            width: 64,
            n_shapes: 3,
            max_disp: 6.0,
        }
    }
}

/// Load `.ppm`/`.pgm` or `.png` into `(1,3,H,W)`.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let img: Tensor<T> = match ext.as_deref() {
        Some("png") => {
            let dyn_img = image::open(path).map_err(|e| Error::format("image", format!("{}: {e}", path.display())))?;
            let rgb = dyn_img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| T::lit(raw[(y * w + x) * 3 + c] as f64 / 255.0))
        }
        _ => read_ppm(path)?,
    };
    if img.c() == 1 {
        let [_, _, h, w] = img.shape();
        return Ok(Tensor::from_fn([1, 3, h, w], |[_, _, y, x]| img.at(0, 0, y, x)));
    }
    Ok(img)
}

/// Centre crop to the largest extent divisible by 16.
pub fn center_crop16<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, h, w] = img.shape();
    let (ch, cw) = (h / 16 * 16, w / 16 * 16);
    if ch == 0 || cw == 0 {
        return Err(Error::contract("load_triplet", format!("image {h}x{w} smaller than 16x16")));
    }
    Ok(img.crop((h - ch) / 2, (w - cw) / 2, ch, cw))
}

fn find_frame(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["ppm", "png", "pgm"]
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

/// Folder dataset; samples are subfolders in sorted name order and their
/// ids are their positions in that order.
#[derive(Clone, Debug)]
pub struct DirDataset {
    pub root: PathBuf,
    pub samples: Vec<[PathBuf; 3]>,
}

impl DirDataset {
    /// Index `root`. Strict mode fails on any missing frame; lenient mode
    /// also decodes every sample up front and skips broken ones with a warning.
    pub fn open(root: &Path, lenient: bool) -> Result<Self> {
        let rd = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut dirs: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        dirs.sort();
        let mut samples = Vec::new();
        for d in dirs {
            let frames: Vec<_> = ["frame0", "frame1", "frame2"].iter().map(|s| find_frame(&d, s)).collect();
            let missing: Vec<String> = frames
                .iter()
                .zip(["frame0", "frame1", "frame2"])
                .filter(|(f, _)| f.is_none())
                .map(|(_, s)| d.join(s).display().to_string())
                .collect();
            if !missing.is_empty() {
                let e = Error::Load(format!("missing frame file(s): {}", missing.join(", ")));
                if lenient {
                    log::warn!("skipping sample: {e}");
                    continue;
                }
                return Err(e);
            }
            let paths = [frames[0].clone().unwrap(), frames[1].clone().unwrap(), frames[2].clone().unwrap()];
            if lenient {
                if let Err(e) = load_paths::<f32>(&paths, 0) {
                    log::warn!("skipping sample {}: {e}", d.display());
                    continue;
                }
            }
            samples.push(paths);
        }
        Ok(DirDataset {
            root: root.to_path_buf(),
            samples,
        })
    }
}

fn load_paths<T: Scalar>(p: &[PathBuf; 3], id: u64) -> Result<Triplet<T>> {
    let i0 = center_crop16(&load_image(&p[0])?)?;
    let gt = center_crop16(&load_image(&p[1])?)?;
    let i1 = center_crop16(&load_image(&p[2])?)?;
    if i0.shape() != gt.shape() || i0.shape() != i1.shape() {
        return Err(Error::format(
            "triplet",
            format!("frame sizes differ in {}", p[0].parent().unwrap_or(Path::new("")).display()),
        ));
    }
    Ok(Triplet {
        i0,
        gt,
        i1,
        sample_id: id,
        motion_mask: None,
    })
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Synthetic(SynthSpec),
    Dir(DirDataset),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Synthetic(s) => s.count,
            Dataset::Dir(d) => d.samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample at position `i`; its id is `i`.
    pub fn get<T: Scalar>(&self, i: usize) -> Result<Triplet<T>> {
        match self {
            Dataset::Synthetic(s) => {
                let mut t = synth_triplet(mix_seed(s.seed, i as u64), s.height, s.width, s.n_shapes, s.max_disp)?;
                t.sample_id = i as u64;
                Ok(t)
            }
            Dataset::Dir(d) => {
                let p = d
                    .samples
                    .get(i)
                    .ok_or_else(|| Error::contract("dataset", format!("index {i} out of range")))?;
                load_paths(p, i as u64)
            }
        }
    }
}

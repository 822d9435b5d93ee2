//! Checkpoint files.
//!
//! Layout (little-endian): magic `UGSPCKPT`, version `u32`, count `u32`, then
//! per entry `name_len: u16`, name bytes, `rank: u8`, `rank` dims as `u32`,
//! and the payload as `f32`. Besides network parameters a checkpoint may hold
//! `meta.*` scalars and `adam.*` optimizer state.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamW};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vfi::NetConfig;

pub const MAGIC: &[u8; 8] = b"UGSPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(Entry {
            name: name.into(),
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        });
    }

    pub fn set_meta(&mut self, key: &str, v: f64) {
        let name = format!("meta.{key}");
        self.entries.retain(|e| e.name != name);
        self.push(name, &Tensor::<f64>::scalar(v));
    }

    pub fn meta(&self, key: &str) -> Option<f64> {
        self.get(&format!("meta.{key}")).and_then(|e| e.data.first()).map(|&v| v as f64)
    }

    /// Network parameters plus the configuration needed to rebuild the model.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, cfg: &NetConfig) -> Self {
        let mut ck = Checkpoint::default();
        for (_, p) in store.iter() {
            ck.push(p.name.clone(), &p.value);
        }
        ck.set_meta("width_mult", cfg.width_mult);
        ck.set_meta("sparse_convs", cfg.sparse_convs as f64);
        ck
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let cfg = NetConfig {
            width_mult: self.meta("width_mult").ok_or_else(|| Error::Load("checkpoint lacks meta.width_mult".into()))?,
            sparse_convs: self
                .meta("sparse_convs")
                .ok_or_else(|| Error::Load("checkpoint lacks meta.sparse_convs".into()))? as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn add_optimizer<T: Scalar>(&mut self, store: &ParamStore<T>, opt: &AdamW<T>) {
        for ((_, p), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            self.push(format!("adam.m.{}", p.name), m);
            self.push(format!("adam.v.{}", p.name), v);
        }
        self.set_meta("adam.step", opt.step as f64);
    }

    pub fn optimizer<T: Scalar>(&self, store: &ParamStore<T>, cfg: AdamConfig) -> Result<Option<AdamW<T>>> {
        let Some(step) = self.meta("adam.step") else {
            return Ok(None);
        };
        let mut opt = AdamW::new(store, cfg);
        opt.step = step as u64;
        for (i, (_, p)) in store.iter().enumerate() {
            for (kind, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let name = format!("adam.{kind}.{}", p.name);
                let e = self.get(&name).ok_or_else(|| Error::Load(format!("missing optimizer entry {name}")))?;
                *dst = entry_tensor(e, p.value.shape())?;
            }
        }
        Ok(Some(opt))
    }

    /// Copy every parameter whose name starts with `prefix.` into `store`.
    /// Unknown names and shape mismatches are load errors; so is any store
    /// parameter under `prefix` missing from the checkpoint.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        let pre = format!("{prefix}.");
        let mut seen = 0;
        for e in self.entries.iter().filter(|e| e.name.starts_with(&pre)) {
            let id = store
                .id(&e.name)
                .ok_or_else(|| Error::Load(format!("unknown parameter {}", e.name)))?;
            let t = entry_tensor(e, store.shape(id))?;
            store.set_value(id, t)?;
            seen += 1;
        }
        let expected = store.iter().filter(|(_, p)| p.name.starts_with(&pre)).count();
        if seen != expected {
            return Err(Error::Load(format!(
                "checkpoint holds {seen} of {expected} parameters under {prefix}"
            )));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u16).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.dims.len() as u8])?;
            for &d in &e.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(Error::format("checkpoint", format!("truncated at byte {pos}")));
            }
            pos += n;
            Ok(&buf[pos - n..pos])
        };
        if take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2")) as usize;
            let name = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
            let rank = take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize);
            }
            let n: usize = dims.iter().product();
            let data = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if pos != buf.len() {
            return Err(Error::format("checkpoint", "trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn entry_tensor<T: Scalar>(e: &Entry, shape: [usize; 4]) -> Result<Tensor<T>> {
    let mut dims = e.dims.clone();
    while dims.len() < 4 {
        dims.insert(0, 1);
    }
    if dims != shape {
        return Err(Error::Load(format!("{}: shape {:?} does not match model {:?}", e.name, e.dims, shape)));
    }
    Tensor::from_vec(shape, e.data.iter().map(|&v| T::lit(v as f64)).collect())
}

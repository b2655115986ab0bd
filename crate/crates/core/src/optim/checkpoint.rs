use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::scheduler::{EarlyStop, Plateau, PlateauConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"VNBLACKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer, scheduler and early-stop state at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub adam: Adam,
    pub scheduler: Plateau,
    pub early: EarlyStop,
    pub epoch: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optim: Option<OptimState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    adam: Option<AdamConfig>,
    plateau: Option<PlateauConfig>,
    early_patience: Option<u32>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for x in data {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| Error::format(self.path, format!("tensor {name} has implausible shape {shape:?}")))?;
        let raw = self.take(4 * n)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(self.path, format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
        w.u32(CHECKPOINT_VERSION);
        let header = Header {
            model: self.model.clone(),
            adam: self.optim.as_ref().map(|o| o.adam.cfg.clone()),
            plateau: self.optim.as_ref().map(|o| o.scheduler.cfg.clone()),
            early_patience: self.optim.as_ref().map(|o| o.early.patience),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
        w.bytes(&json);
        w.u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.tensor(name, t.shape(), t.data());
        }
        match &self.optim {
            None => w.u32(0),
            Some(o) => {
                w.u32(1);
                for ((_, name, t), (m, v)) in self.params.iter().zip(o.adam.m.iter().zip(&o.adam.v)) {
                    w.tensor(&format!("adam.m/{name}"), t.shape(), m);
                    w.tensor(&format!("adam.v/{name}"), t.shape(), v);
                }
                w.u64(o.adam.step);
                w.f64(o.adam.lr);
                w.f64(o.scheduler.lr);
                w.f64(o.scheduler.best);
                w.u32(o.scheduler.bad_epochs);
                w.f64(o.early.best);
                w.u32(o.early.bad_epochs);
                w.u64(o.epoch);
            }
        }
        Ok(w.0)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..10] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let mut r = Reader { buf: bytes, pos: 10, path };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let header: Header = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::format(path, format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            params.add(name, t).map_err(|e| Error::format(path, e.to_string()))?;
        }
        let optim = match r.u32()? {
            0 => None,
            1 => {
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for (_, name, t) in params.iter() {
                    for (prefix, dst) in [("adam.m/", &mut m), ("adam.v/", &mut v)] {
                        let (got, mt) = r.tensor()?;
                        if got != format!("{prefix}{name}") || mt.shape() != t.shape() {
                            return Err(Error::format(path, format!("unexpected optimizer tensor {got}")));
                        }
                        dst.push(mt.into_data());
                    }
                }
                let missing = || Error::format(path, "optimizer state without configuration");
                let step = r.u64()?;
                let adam_lr = r.f64()?;
                let adam = Adam {
                    cfg: header.adam.clone().ok_or_else(missing)?,
                    lr: adam_lr,
                    step,
                    m,
                    v,
                };
                let scheduler = Plateau {
                    cfg: header.plateau.clone().ok_or_else(missing)?,
                    lr: r.f64()?,
                    best: r.f64()?,
                    bad_epochs: r.u32()?,
                };
                let early = EarlyStop {
                    patience: header.early_patience.ok_or_else(missing)?,
                    best: r.f64()?,
                    bad_epochs: r.u32()?,
                };
                Some(OptimState {
                    adam,
                    scheduler,
                    early,
                    epoch: r.u64()?,
                })
            }
            other => return Err(Error::format(path, format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            model: header.model,
            params,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Copies parameter values into `store`, which must hold the same
    /// tensors in the same order.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.iter().enumerate() {
            let (name, shape) = (store.name(*id).to_string(), store.get(*id).shape().to_vec());
            let src = self.params.iter().nth(k);
            match src {
                Some((_, n, t)) if n == name && t.shape() == shape.as_slice() => {
                    store.get_mut(*id).data_mut().copy_from_slice(t.data());
                }
                Some((_, n, t)) => {
                    return Err(Error::Config(format!(
                        "checkpoint tensor {n} {:?} does not match model tensor {name} {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("checkpoint is missing tensor {name}"))),
            }
        }
        if self.params.len() != ids.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                ids.len()
            )));
        }
        Ok(())
    }
}

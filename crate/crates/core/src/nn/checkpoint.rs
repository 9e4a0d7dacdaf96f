//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "MUSECKPT"
//! version     u32      1
//! width       u8       4 (f32 values) or 8 (f64 values)
//! meta        u32 len + UTF-8 bytes (free-form, usually JSON)
//! count       u32
//! per parameter:
//!   name      u32 len + UTF-8 bytes
//!   ndim      u32, then ndim × u32 extents
//!   flags     u8  (bit 0 trainable, bit 1 frozen)
//!   values    product(extents) × width bytes
//! optimizer   u8 present flag; when 1:
//!   lr, beta1, beta2, eps, weight_decay   5 × f64
//!   t         u64
//!   count     u32
//!   per slot: name, ndim + extents, m values, v values (width bytes each)
//! ```
//!
//! With width 8 a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::optim::{AdamWConfig, Moments, OptimizerState};
use super::param::Module;
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MUSECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueWidth {
    F32,
    F64,
}

impl ValueWidth {
    fn tag(self) -> u8 {
        match self {
            ValueWidth::F32 => 4,
            ValueWidth::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub trainable: bool,
    pub frozen: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture<M: Module + ?Sized>(model: &M, optimizer: Option<&OptimizerState>, meta: impl Into<String>) -> Self {
        let mut params = Vec::new();
        model.visit_params(&mut |p| {
            params.push(ParamRecord {
                name: p.name().to_string(),
                trainable: p.trainable,
                frozen: p.frozen,
                value: p.value.clone(),
            })
        });
        Self { meta: meta.into(), params, optimizer: optimizer.cloned() }
    }

    /// Copies values and flags into `model`. Every model parameter must be
    /// present with a matching shape and no record may be left over.
    pub fn restore<M: Module + ?Sized>(&self, model: &mut M) -> Result<()> {
        let by_name: BTreeMap<&str, &ParamRecord> = self.params.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut problem: Option<Error> = None;
        let mut seen = 0usize;
        model.visit_params(&mut |p| {
            if problem.is_some() {
                return;
            }
            match by_name.get(p.name()) {
                None => {
                    problem = Some(Error::CheckpointParam {
                        name: p.name().to_string(),
                        reason: "missing from checkpoint".into(),
                    })
                }
                Some(r) if r.value.shape() != p.shape() => {
                    problem = Some(Error::CheckpointParam {
                        name: p.name().to_string(),
                        reason: format!("checkpoint shape {:?}, model shape {:?}", r.value.shape(), p.shape()),
                    })
                }
                Some(_) => seen += 1,
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        if seen != self.params.len() {
            let names = model.param_names();
            let extra = self.params.iter().find(|r| !names.contains(&r.name)).map(|r| r.name.clone());
            return Err(Error::CheckpointParam {
                name: extra.unwrap_or_default(),
                reason: "not present in the model".into(),
            });
        }
        model.visit_params_mut(&mut |p| {
            let r = by_name[p.name()];
            p.value = r.value.clone();
            p.trainable = r.trainable;
            p.frozen = r.frozen;
            p.grad = None;
        });
        Ok(())
    }

    pub fn to_bytes(&self, width: ValueWidth) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new(), width };
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.buf.push(width.tag());
        w.str(&self.meta);
        w.u32(self.params.len() as u32);
        for r in &self.params {
            w.str(&r.name);
            w.shape(r.value.shape());
            w.buf.push(u8::from(r.trainable) | (u8::from(r.frozen) << 1));
            w.values(r.value.data());
        }
        match &self.optimizer {
            None => w.buf.push(0),
            Some(o) => {
                w.buf.push(1);
                let c = o.config;
                for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    w.buf.extend_from_slice(&v.to_le_bytes());
                }
                w.buf.extend_from_slice(&o.t.to_le_bytes());
                w.u32(o.moments.len() as u32);
                for (name, mo) in &o.moments {
                    w.str(name);
                    w.shape(mo.m.shape());
                    w.values(mo.m.data());
                    w.values(mo.v.data());
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, width: ValueWidth::F64 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        r.width = match r.u8()? {
            4 => ValueWidth::F32,
            8 => ValueWidth::F64,
            other => return Err(Error::format(format!("unknown value width {other}"))),
        };
        let meta = r.str()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let shape = r.shape()?;
            let flags = r.u8()?;
            let value = r.tensor(&shape)?;
            params.push(ParamRecord { name, trainable: flags & 1 != 0, frozen: flags & 2 != 0, value });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut c = [0.0; 5];
                for v in &mut c {
                    *v = r.f64()?;
                }
                let config = AdamWConfig { lr: c[0], beta1: c[1], beta2: c[2], eps: c[3], weight_decay: c[4] };
                let t = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let n = r.u32()? as usize;
                let mut moments = BTreeMap::new();
                for _ in 0..n {
                    let name = r.str()?;
                    let shape = r.shape()?;
                    let m = r.tensor(&shape)?;
                    let v = r.tensor(&shape)?;
                    moments.insert(name, Moments { m, v });
                }
                Some(OptimizerState { config, t, moments })
            }
            other => return Err(Error::format(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Self { meta, params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes(ValueWidth::F64))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Writer {
    buf: Vec<u8>,
    width: ValueWidth,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn shape(&mut self, shape: &[usize]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
    }

    fn values(&mut self, data: &[f64]) {
        for &v in data {
            match self.width {
                ValueWidth::F32 => self.buf.extend_from_slice(&(v as f32).to_le_bytes()),
                ValueWidth::F64 => self.buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    width: ValueWidth,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("name is not UTF-8"))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(Error::format(format!("implausible rank {nd}")));
        }
        (0..nd).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let w = match self.width {
            ValueWidth::F32 => 4,
            ValueWidth::F64 => 8,
        };
        let raw = self.take(n.checked_mul(w).ok_or_else(|| Error::format("size overflow"))?)?;
        let data = match self.width {
            ValueWidth::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            ValueWidth::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Tensor::from_vec(shape, data)
    }
}

//! Binary checkpoint format.
//!
//! A checkpoint stores: a magic/version header, the element dtype, the full
//! canonical config text of the run that produced it, every named parameter
//! and buffer, and (optionally) trainer state so an interrupted run can
//! resume bit-exactly.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic      8  b"FASLCKPT"
//! version    u32
//! dtype      u8          1 = f32, 2 = f64
//! config     u64 len + UTF-8 bytes
//! params     u64 count, then entries
//! buffers    u64 count, then entries
//! trainer    u8 flag; if 1: step u64, next_epoch u64,
//!            first-moment entries, second-moment entries
//!
//! entry      name (u64 len + UTF-8), rank u64, extents u64 each,
//!            row-major scalars in the file dtype
//! ```
//!
//! Scalars convert on load when the file dtype differs from the build's
//! element type (an f64 build reads f32 checkpoints and vice versa).

use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use crate::Elem;

const MAGIC: &[u8; 8] = b"FASLCKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[cfg(feature = "f32")]
const NATIVE_DTYPE: u8 = DTYPE_F32;
#[cfg(not(feature = "f32"))]
const NATIVE_DTYPE: u8 = DTYPE_F64;

/// A named tensor payload (parameter, buffer, or optimizer moment).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Elem>,
}

/// Optimizer state captured alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    /// Completed optimizer steps.
    pub step: u64,
    /// Index of the next epoch to run.
    pub next_epoch: u64,
    /// Adam first moments, aligned with parameters by name.
    pub first: Vec<TensorEntry>,
    /// Adam second moments, aligned with parameters by name.
    pub second: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<TensorEntry>,
    pub buffers: Vec<TensorEntry>,
    pub trainer: Option<TrainerState>,
}

impl Checkpoint {
    /// Snapshot a parameter set (and optional trainer state) for saving.
    pub fn capture(
        config_text: impl Into<String>,
        set: &ParamSet,
        trainer: Option<TrainerState>,
    ) -> Checkpoint {
        let params = set
            .params()
            .iter()
            .map(|p| TensorEntry { name: p.name(), shape: p.shape(), data: p.snapshot() })
            .collect();
        let buffers = set
            .buffers()
            .iter()
            .map(|b| TensorEntry { name: b.name(), shape: b.shape(), data: b.snapshot() })
            .collect();
        Checkpoint { config_text: config_text.into(), params, buffers, trainer }
    }

    /// Copy stored parameters and buffers back into a live parameter set.
    /// Every stored entry must match a live one by name and shape, and the
    /// counts must agree, so model and checkpoint cannot silently diverge.
    pub fn restore(&self, set: &ParamSet) -> Result<()> {
        if self.params.len() != set.params().len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters but the model has {}",
                self.params.len(),
                set.params().len()
            )));
        }
        if self.buffers.len() != set.buffers().len() {
            return Err(Error::Config(format!(
                "checkpoint has {} buffers but the model has {}",
                self.buffers.len(),
                set.buffers().len()
            )));
        }
        for e in &self.params {
            let p = set.find(&e.name).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter {} not present in the model", e.name))
            })?;
            if p.shape() != e.shape {
                return Err(Error::Config(format!(
                    "checkpoint parameter {}: stored shape {:?}, model shape {:?}",
                    e.name,
                    e.shape,
                    p.shape()
                )));
            }
            p.set_data(e.data.clone())?;
        }
        for e in &self.buffers {
            let b = set
                .buffers()
                .iter()
                .find(|b| b.name() == e.name)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "checkpoint buffer {} not present in the model",
                        e.name
                    ))
                })?;
            if b.shape() != e.shape {
                return Err(Error::Config(format!(
                    "checkpoint buffer {}: stored shape {:?}, model shape {:?}",
                    e.name,
                    e.shape,
                    b.shape()
                )));
            }
            b.set(e.data.clone());
        }
        Ok(())
    }

    /// Reject a checkpoint whose embedded config differs from the expected
    /// canonical text.
    pub fn require_config(&self, expected: &str) -> Result<()> {
        if self.config_text != expected {
            return Err(Error::Config(
                "checkpoint was produced by a different configuration than the one provided"
                    .to_string(),
            ));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(NATIVE_DTYPE);
        put_str(&mut buf, &self.config_text);
        put_entries(&mut buf, &self.params);
        put_entries(&mut buf, &self.buffers);
        match &self.trainer {
            None => buf.push(0),
            Some(t) => {
                buf.push(1);
                buf.extend_from_slice(&t.step.to_le_bytes());
                buf.extend_from_slice(&t.next_epoch.to_le_bytes());
                put_entries(&mut buf, &t.first);
                put_entries(&mut buf, &t.second);
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".to_string()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
            return Err(Error::Data(format!("unknown checkpoint dtype tag {dtype}")));
        }
        let config_text = r.str()?;
        let params = r.entries(dtype)?;
        let buffers = r.entries(dtype)?;
        let trainer = match r.u8()? {
            0 => None,
            1 => Some(TrainerState {
                step: r.u64()?,
                next_epoch: r.u64()?,
                first: r.entries(dtype)?,
                second: r.entries(dtype)?,
            }),
            f => return Err(Error::Data(format!("bad trainer-state flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { config_text, params, buffers, trainer })
    }

    /// Atomic save (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Data(format!("reading checkpoint {}: {e}", path.display())))?;
        Checkpoint::decode(&bytes)
            .map_err(|e| Error::Data(format!("checkpoint {}: {e}", path.display())))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_entries(buf: &mut Vec<u8>, entries: &[TensorEntry]) {
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        put_str(buf, &e.name);
        buf.extend_from_slice(&(e.shape.len() as u64).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data("checkpoint string is not UTF-8".to_string()))
    }

    fn entries(&mut self, dtype: u8) -> Result<Vec<TensorEntry>> {
        let count = self.u64()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.str()?;
            let rank = self.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            match dtype {
                DTYPE_F32 => {
                    for _ in 0..numel {
                        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
                        data.push(v as Elem);
                    }
                }
                _ => {
                    for _ in 0..numel {
                        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
                        data.push(v as Elem);
                    }
                }
            }
            out.push(TensorEntry { name, shape, data });
        }
        Ok(out)
    }
}

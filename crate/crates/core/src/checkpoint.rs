//! Versioned binary checkpoints of a named parameter set.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "STCNNCKP"
//! version    u32      1
//! dtype      u8       1 = f32, 2 = f64
//! model      u32 length + UTF-8
//! config     u32 length + UTF-8 (key = value lines)
//! count      u32      number of tensors
//! table      per tensor: u32 length + UTF-8 name, u32 rank, rank × u64 extent
//! payload    every tensor's values in table order, row-major, `dtype` LE
//! ```
//!
//! Nothing follows the payload; trailing bytes are a format error.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamSet;
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"STCNNCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar = f64> {
    pub model: String,
    pub config: String,
    pub params: ParamSet<S>,
}

fn dtype_code(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => 1,
        Dtype::F64 => 2,
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype_code(S::DTYPE));
        put_str(&mut out, &self.model);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.params.tensors() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint stored in either precision, converting to `S`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {}", version)));
        }
        let dtype = match r.take(1)?[0] {
            1 => Dtype::F32,
            2 => Dtype::F64,
            c => return Err(CheckpointError::Format(format!("unknown dtype code {}", c))),
        };
        let model = r.string()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            table.push((name, shape));
        }
        let mut params = ParamSet::default();
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| {
                CheckpointError::Format(format!("tensor {} is too large", name))
            })?)?;
            let data: Vec<S> = match dtype {
                Dtype::F32 => raw.chunks_exact(4).map(|c| S::of(f32::read_le(c) as f64)).collect(),
                Dtype::F64 => raw.chunks_exact(8).map(|c| S::of(f64::read_le(c))).collect(),
            };
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Format(format!("tensor {}: {}", name, e)))?;
            params.push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { model, config, params })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Format(format!(
                "truncated: needed {} bytes at offset {}, {} left",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Format("non-UTF-8 string".into()))
    }
}

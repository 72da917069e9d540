//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "ATTNCKPT"
//! version u32 (= 1)
//! repeated until end of file:
//!   name_len u16, name bytes (UTF-8)
//!   rank u8, dims u32 x rank
//!   data f64 x prod(dims)
//! ```
//!
//! Sections are written in name order, so identical parameters always
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{DecoderError, DecoderParams};
use crate::graphcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATTNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("section name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate section `{0}`")]
    DuplicateSection(String),
    #[error("section `{0}` holds a non-finite value")]
    NonFinite(String),
    #[error("invalid section `{name}`: {reason}")]
    InvalidSection { name: String, reason: String },
    #[error(transparent)]
    Params(#[from] DecoderError),
}

pub fn write_checkpoint_bytes(params: &DecoderParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(params: &DecoderParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint_bytes(params))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<DecoderParams, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(if CHECKPOINT_MAGIC.starts_with(bytes) {
            CheckpointError::Truncated("magic")
        } else {
            CheckpointError::BadMagic
        });
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut tensors = BTreeMap::new();
    while !r.at_end() {
        let name_len = r.u16("section name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "section name")?)
            .map_err(|_| CheckpointError::InvalidName)?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::InvalidSection {
                name: name.clone(),
                reason: "dimension overflow".into(),
            })?;
        let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated("data"))?, "data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        let tensor = Tensor::new(&dims, data).map_err(|e| CheckpointError::InvalidSection {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::DuplicateSection(name));
        }
    }
    let dims = DecoderParams::infer_dims(&tensors)?;
    Ok(DecoderParams::from_tensors(dims, tensors)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<DecoderParams, CheckpointError> {
    read_checkpoint_bytes(&fs::read(path)?)
}

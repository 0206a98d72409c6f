//! Binary parameter files.
//!
//! Little-endian layout: magic `MSFA0001`, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u32` rank, `rank` x `u32` dims and the
//! `f32` values in row-major order. Entries are written in name order.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MSFA0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint entry name is not UTF-8")]
    BadName,
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub fn write_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.values() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses checkpoint bytes into `(name, tensor)` entries in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::BadName)?.to_string();
        let rank = r.u32()?;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u32()?;
            n = n.checked_mul(d).ok_or(CheckpointError::Truncated(r.pos))?;
            shape.push(d);
        }
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint(store)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads values into `store`; names and shapes must match exactly.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    apply_entries(store, read_checkpoint(&bytes)?)
}

pub fn apply_entries(store: &mut ParamStore<f32>, entries: Vec<(String, Tensor<f32>)>) -> Result<(), CheckpointError> {
    if entries.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} entries, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let Some(p) = store.param_mut(&name) else {
            return Err(CheckpointError::Mismatch(format!("unknown parameter {name:?}")));
        };
        if p.value.shape() != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: shape {:?}, model has {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "SEPFORMR"
//! version    u32       1
//! config     u32 length + UTF-8 `key = value` lines
//! count      u32       number of parameter tensors
//! per tensor u32 name length + UTF-8 name
//!            u32 ndim, then ndim × u64 extents
//!            numel × f64 values
//! ```
//!
//! Tensors appear in the model's parameter order.

use std::path::Path;

use super::{ModelConfig, SepFormer};
use crate::config::parse_pairs;
use crate::error::{Error, Result};
use crate::params::Parameterized;

const MAGIC: &[u8; 8] = b"SEPFORMR";
const VERSION: u32 = 1;

pub fn write_checkpoint(model: &SepFormer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = model.config().to_text();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("string is not UTF-8"))
    }
}

/// Parses a checkpoint; `path` only labels errors.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<SepFormer> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let mut config = ModelConfig::full_size();
    let text = r.string()?;
    for (key, value) in parse_pairs(&text).map_err(|e| r.fail(e.to_string()))? {
        if !config
            .set(&key, &value)
            .map_err(|e| r.fail(e.to_string()))?
        {
            return Err(r.fail(format!("unknown config key {key:?}")));
        }
    }
    let mut model = SepFormer::new(config, 0).map_err(|e| r.fail(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = model.parameters_mut();
    if count != params.len() {
        return Err(r.fail(format!("expected {} tensors, found {count}", params.len())));
    }
    for (name, tensor) in params.iter_mut() {
        let found = r.string()?;
        if found != *name {
            return Err(r.fail(format!("expected tensor {name}, found {found}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != tensor.shape() {
            return Err(r.fail(format!(
                "{name}: expected shape {:?}, found {shape:?}",
                tensor.shape()
            )));
        }
        let raw = r.take(tensor.numel() * 8)?;
        let data = tensor.data_mut()?;
        for (v, b) in data.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
    }
    drop(params);
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SepFormer, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<SepFormer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}

//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "DGCK" | u32 version | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] | f64 values[prod(dims)]
//! u32 config length | UTF-8 config text
//! ```

use std::fs;
use std::path::Path;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams, config: &TrainConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

pub fn save_checkpoint(params: &ModelParams, config: &TrainConfig, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, len: usize, what: &str) -> Result<&'a str> {
        let raw = self.take(len, what)?;
        std::str::from_utf8(raw).map_err(|_| Error::parse(self.path, format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic").map_err(|_| Error::BadMagic {
        path: path.to_path_buf(),
        expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        found: String::from_utf8_lossy(bytes).into_owned(),
    })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut names = Vec::with_capacity(count.min(1024));
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        names.push(r.utf8(len, "tensor name")?.to_string());
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(path, format!("tensor {i} shape overflows")))?;
        let raw = r.take(n.saturating_mul(8), "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::parse(path, e.to_string()))?);
    }
    let len = r.u32("config length")? as usize;
    let text = r.utf8(len, "config text")?;
    if r.pos != bytes.len() {
        return Err(Error::parse(
            path,
            format!("{} trailing bytes after config", bytes.len() - r.pos),
        ));
    }
    let config = TrainConfig::from_text(text).map_err(|e| Error::parse(path, e.to_string()))?;
    let params = ModelParams::from_tensors(tensors).map_err(|e| Error::parse(path, e.to_string()))?;
    if params.names() != names {
        return Err(Error::parse(
            path,
            format!("unexpected tensor names {names:?}"),
        ));
    }
    Ok((params, config))
}

//! Binary checkpoint format.
//!
//! ```text
//! "XCAP" | u32 version | u32 len | config JSON | u64 seed | u32 count
//! then per tensor: u32 len | name | u32 ndim | u64 dims... | f64 values...
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use ndtensor::Tensor;

use super::{XCapsConfig, XCapsModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XCAP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

impl XCapsModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.param_count() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: XCapsConfig = serde_json::from_slice(r.len_prefixed()?)?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = String::from_utf8(r.len_prefixed()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let tensor = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Self::from_parts(config, seed, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

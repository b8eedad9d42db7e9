//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AMLG" | version u32 | payload bytes u64 | entries u32
//! per entry: name length u32 | UTF-8 name | rank u32 | dims u64 x rank | f64 x numel
//! ```
//!
//! The payload length counts every byte after its own field.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::write_atomic;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMLG";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            body.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        let end = (self.pos as u64).checked_add(n).filter(|&e| e <= self.bytes.len() as u64);
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end as usize];
                self.pos = end as usize;
                Ok(out)
            }
            None => Err(Error::ByteCount {
                expected: (self.pos as u64).saturating_add(n),
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version > VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let declared = cur.u64()?;
    let expected = (HEADER as u64).saturating_add(declared);
    if expected != bytes.len() as u64 {
        return Err(Error::ByteCount {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let count = cur.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = cur.u32()?;
        let name = std::str::from_utf8(cur.take(len as u64)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()?;
        let mut dims = Vec::new();
        for _ in 0..rank {
            dims.push(cur.u64()?);
        }
        let numel = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        let bytes_needed = numel.and_then(|n| n.checked_mul(8)).unwrap_or(u64::MAX);
        let raw = cur.take(bytes_needed)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let shape = dims.into_iter().map(|d| d as usize).collect();
        let tensor = Tensor::new(shape, data)?;
        params
            .insert(name, tensor)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::ByteCount {
            expected: cur.pos as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Little-endian binary tensor archive.
//!
//! ```text
//! magic   8 bytes  "DS2NCKPT"
//! version u32
//! config  u64      hash of the run configuration
//! count   u32      number of records
//! record: name_len u32, name (UTF-8), dtype u8 (0 = f32, 1 = f64),
//!         rank u32, extents u64 x rank, values (dtype, little-endian)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element};

pub const MAGIC: &[u8; 8] = b"DS2NCKPT";
pub const VERSION: u32 = 1;

/// Values of one record in their stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Values,
}

impl Record {
    pub fn new<T: Element>(name: impl Into<String>, shape: &[usize], data: &[T]) -> Self {
        let values = match T::DTYPE {
            DType::F32 => Values::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Values::F64(data.iter().map(|v| v.as_f64()).collect()),
        };
        Record {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        }
    }

    /// Stores an exact integer as a one-element f64 record (exact below 2^53).
    pub fn counter(name: impl Into<String>, v: u64) -> Self {
        Record {
            name: name.into(),
            shape: vec![1],
            values: Values::F64(vec![v as f64]),
        }
    }

    /// Values converted to `T`; errors if the stored precision differs.
    pub fn to_vec<T: Element>(&self) -> Result<Vec<T>> {
        match (&self.values, T::DTYPE) {
            (Values::F32(v), DType::F32) => Ok(v.iter().map(|&x| T::from_f64_lossy(f64::from(x))).collect()),
            (Values::F64(v), DType::F64) => Ok(v.iter().map(|&x| T::from_f64_lossy(x)).collect()),
            _ => Err(Error::Checkpoint(format!("record {} has unexpected precision", self.name))),
        }
    }

    pub fn as_counter(&self) -> Result<u64> {
        match &self.values {
            Values::F64(v) if v.len() == 1 && v[0] >= 0.0 && v[0].fract() == 0.0 => Ok(v[0] as u64),
            _ => Err(Error::Checkpoint(format!("record {} is not a counter", self.name))),
        }
    }
}

pub fn encode(config_hash: u64, records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        let code = match r.values {
            Values::F32(_) => DType::F32,
            Values::F64(_) => DType::F64,
        };
        out.push(code as u8);
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &e in &r.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &r.values {
            Values::F32(v) => f32::to_le_bytes_vec(v, &mut out),
            Values::F64(v) => f64::to_le_bytes_vec(v, &mut out),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes an archive; returns the stored config hash and the records.
pub fn decode(bytes: &[u8]) -> Result<(u64, Vec<Record>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let code = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| Error::Checkpoint(format!("record {name} is too large")))?;
        let values = match code {
            0 => Values::F32(r.take(n.saturating_mul(4))?.chunks_exact(4).map(f32::from_le_chunk).collect()),
            1 => Values::F64(r.take(n.saturating_mul(8))?.chunks_exact(8).map(f64::from_le_chunk).collect()),
            other => return Err(Error::Checkpoint(format!("record {name}: unknown dtype code {other}"))),
        };
        records.push(Record { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((hash, records))
}

pub fn save(path: &Path, config_hash: u64, records: &[Record]) -> Result<()> {
    fs::write(path, encode(config_hash, records)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(u64, Vec<Record>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "RSFM"
//! version  u32
//! checksum 32 bytes SHA-256 of the body
//! length   u64      body length in bytes
//! body:
//!   count  u32
//!   count × { name_len u32, name, dtype u8, rows u64, cols u64, data }
//!   meta_len u64, JSON metadata
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::Matrix;
use crate::scalar::{DType, Scalar};

pub const MAGIC: [u8; 4] = *b"RSFM";
pub const FORMAT_VERSION: u32 = 2;
const HEADER_LEN: usize = 4 + 4 + 32 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor {name} stored as {found:?}, expected {expected:?}")]
    DType { name: String, found: u8, expected: DType },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// Named tensors plus a JSON metadata record.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData<T> {
    pub tensors: Vec<(String, Matrix<T>)>,
    pub metadata: serde_json::Value,
}

pub fn encode<T: Scalar>(data: &CheckpointData<T>) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend((data.tensors.len() as u32).to_le_bytes());
    for (name, m) in &data.tensors {
        body.extend((name.len() as u32).to_le_bytes());
        body.extend(name.as_bytes());
        body.push(T::DTYPE.tag());
        body.extend((m.rows() as u64).to_le_bytes());
        body.extend((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            v.write_le(&mut body);
        }
    }
    let meta = serde_json::to_vec(&data.metadata).expect("JSON values always serialize");
    body.extend((meta.len() as u64).to_le_bytes());
    body.extend(meta);

    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend(Sha256::digest(&body));
    out.extend((body.len() as u64).to_le_bytes());
    out.extend(body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("record overruns body at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("size overflows usize".into()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<CheckpointData<T>, CheckpointError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let checksum = &bytes[8..40];
    let body_len = u64::from_le_bytes(bytes[40..48].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() < body_len {
        return Err(CheckpointError::Truncated {
            expected: HEADER_LEN + body_len,
            found: bytes.len(),
        });
    }
    if body.len() > body_len {
        return Err(CheckpointError::Malformed("trailing bytes after body".into()));
    }
    if Sha256::digest(body).as_slice() != checksum {
        return Err(CheckpointError::Checksum);
    }

    let mut r = Reader { buf: body, pos: 0 };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        if tag != T::DTYPE.tag() {
            return Err(CheckpointError::DType {
                name,
                found: tag,
                expected: T::DTYPE,
            });
        }
        let rows = r.usize()?;
        let cols = r.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} shape overflows")))?;
        let raw = r.take(n * T::DTYPE.width())?;
        let data = raw.chunks_exact(T::DTYPE.width()).map(T::read_le).collect();
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, m));
    }
    let meta_len = r.usize()?;
    let metadata =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("unread bytes after metadata".into()));
    }
    Ok(CheckpointData { tensors, metadata })
}

pub fn write_file<T: Scalar>(path: &Path, data: &CheckpointData<T>) -> crate::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
    }
    std::fs::write(path, encode(data)).map_err(|e| crate::Error::io(path, e))
}

pub fn read_file<T: Scalar>(path: &Path) -> crate::Result<CheckpointData<T>> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

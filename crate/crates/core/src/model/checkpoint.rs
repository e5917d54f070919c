//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSEG" | version: u32 | header_len: u32 | header: UTF-8 JSON | arrays
//! ```
//!
//! The header is `{"dtype", "meta", "arrays": [{"name", "shape", "offset"}]}`
//! where `offset` is the byte offset of each array relative to the start of
//! the array section. Arrays are raw IEEE-754 values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// Named arrays plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: Value,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0;
        for (name, t) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * T::BYTES;
        }
        let header = serde_json::to_vec(&Header {
            dtype: T::DTYPE.to_string(),
            meta: self.meta.clone(),
            arrays: entries,
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.arrays {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = split_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "dtype {} cannot be read as {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut expected_offset = 0;
        for entry in header.arrays {
            let numel: usize = entry.shape.iter().product();
            let len = numel * T::BYTES;
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "array '{}' at offset {}, expected {expected_offset}",
                    entry.name, entry.offset
                )));
            }
            let raw = body
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("array '{}' truncated", entry.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            let tensor = Tensor::new(entry.shape, data)
                .map_err(|e| Error::Checkpoint(format!("array '{}': {e}", entry.name)))?;
            arrays.push((entry.name, tensor));
            expected_offset += len;
        }
        if expected_offset != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after arrays",
                body.len() - expected_offset
            )));
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Element type recorded in a checkpoint, without decoding its arrays.
pub fn peek_dtype(bytes: &[u8]) -> Result<String> {
    Ok(split_header(bytes)?.0.dtype)
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing CSEG magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Checkpoint("header truncated".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    Ok((header, &bytes[12 + header_len..]))
}

//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"DATRW\0"
//! version    u16 (= 1)
//! config     u32 byte length, then UTF-8 `key = value` lines
//! count      u32 number of tensors
//! manifest   per tensor: u16 name length, name, u8 rank, rank × u32 dims,
//!            u64 payload byte offset
//! payload    f64 scalars, tensors back to back in manifest order
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"DATRW\0";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A parameter store together with the textual model configuration it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `label` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], label: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, label);
        let magic = r.take(6, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error_at(0, "bad magic, expected DATRW\\0"));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error_at(6, format!("unsupported version {version}")));
        }
        let config_len = r.u32("config length")? as usize;
        let config_at = r.pos;
        let config = std::str::from_utf8(r.take(config_len, "config")?)
            .map_err(|_| r.error_at(config_at as u64, "config is not UTF-8"))?
            .to_owned();
        let count = r.u32("tensor count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        let mut expected_offset = 0u64;
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.error_at(name_at as u64, "tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let offset_at = r.pos;
            let offset = r.u64("payload offset")?;
            if offset != expected_offset {
                return Err(r.error_at(
                    offset_at as u64,
                    format!("payload offset {offset} for `{name}`, expected {expected_offset}"),
                ));
            }
            let numel: usize = shape.iter().product();
            expected_offset += 8 * numel as u64;
            manifest.push((name, shape, numel));
        }
        let payload_start = r.pos;
        let remaining = (bytes.len() - payload_start) as u64;
        if remaining != expected_offset {
            return Err(r.error_at(
                (payload_start as u64) + remaining.min(expected_offset),
                format!("payload holds {remaining} bytes, manifest needs {expected_offset}"),
            ));
        }
        let mut params = ParamStore::new();
        for (name, shape, numel) in manifest {
            let at = r.pos as u64;
            let raw = r.take(8 * numel, "payload")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.error_at(at, e.to_string()))?;
            params.add(name, t).map_err(|e| r.error_at(at, e.to_string()))?;
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.to_bytes())
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Cursor over a byte buffer that reports positioned format errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
    label: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], label: &'a str) -> Self {
        Self { bytes, pos: 0, label }
    }

    pub(crate) fn error_at(&self, offset: u64, message: impl Into<String>) -> Error {
        Error::format(self.label, offset, message)
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error_at(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

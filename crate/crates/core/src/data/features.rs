//! `.mhvf` frame-feature files.
//!
//! ```text
//! magic     b"MHVF"
//! version   u16 (= 1)
//! dim       u32 feature width
//! n_frames  u32
//! payload   n_frames × dim little-endian f32, row-major
//! ```

use std::path::Path;

use crate::autodiff::{Reader, Tensor};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MHVF";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_HEADER_LEN: usize = 14;

/// Serializes an `n_frames × dim` matrix, narrowing to f32.
pub fn encode_features(frames: &Tensor) -> Vec<u8> {
    let (n, dim) = (frames.rows(), frames.cols());
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * n * dim);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], label: &str) -> Result<Tensor> {
    let mut r = Reader::new(bytes, label);
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(r.error_at(0, "bad magic, expected MHVF"));
    }
    let version = r.u16("version")?;
    if version != FEATURE_VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}")));
    }
    let dim = r.u32("dim")? as usize;
    let n = r.u32("n_frames")? as usize;
    let need = 4 * n * dim;
    if r.remaining() < need {
        return Err(r.error_at(
            bytes.len() as u64,
            format!("truncated payload: header promises {need} bytes ending at {}", FEATURE_HEADER_LEN + need),
        ));
    }
    if r.remaining() > need {
        return Err(r.error_at((FEATURE_HEADER_LEN + need) as u64, "trailing bytes after payload"));
    }
    let at = r.pos as u64;
    let data: Vec<f64> = r
        .take(need, "payload")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new([n, dim], data).map_err(|e| Error::format(label, at, e.to_string()))
}

pub fn write_frame_features(path: impl AsRef<Path>, frames: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(frames)).map_err(|e| Error::io(path, e))
}

pub fn read_frame_features(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

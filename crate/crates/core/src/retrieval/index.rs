//! Exact cosine index over precomputed video embeddings.
//!
//! On-disk layout (`.datri`):
//!
//! ```text
//! magic       b"DATRI\0"
//! version     u16 (= 1)
//! n, d        u32, u32
//! checkpoint  32-byte SHA-256 of the checkpoint the rows came from
//! ids         n × (u32 byte length, UTF-8)
//! rows        n × d little-endian scalars, f64 (f32 accepted on read)
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::{dot, Reader};
use crate::data::{load_manifest, read_frame_features, VideoRecord};
use crate::error::{Error, Result};
use crate::model::Datr;

pub const INDEX_MAGIC: &[u8; 6] = b"DATRI\0";
pub const INDEX_VERSION: u16 = 1;

/// Row-major `N × d` matrix of unit-norm video embeddings plus their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    matrix: Vec<f64>,
    d: usize,
    checkpoint: [u8; 32],
    positions: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, matrix: Vec<f64>, d: usize, checkpoint: [u8; 32]) -> Result<Self> {
        if d == 0 || matrix.len() != ids.len() * d {
            return Err(Error::Shape {
                op: "index",
                lhs: vec![matrix.len()],
                rhs: vec![ids.len(), d],
            });
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate id `{id}` in index")));
            }
            let row = &matrix[i * d..(i + 1) * d];
            let norm = dot(row, row).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!("index row `{id}` has norm {norm}")));
            }
        }
        Ok(Self {
            ids,
            matrix,
            d,
            checkpoint,
            positions,
        })
    }

    /// Encodes every video with the frozen video encoder.
    pub fn build(videos: &[VideoRecord], model: &Datr) -> Result<Self> {
        let d = model.config().d;
        let mut ids = Vec::with_capacity(videos.len());
        let mut matrix = Vec::with_capacity(videos.len() * d);
        for v in videos {
            ids.push(v.video_id.clone());
            matrix.extend(model.encode_video(&v.frames)?);
        }
        Self::new(ids, matrix, d, model.digest())
    }

    /// Builds from a corpus directory's manifest, reporting every video whose
    /// feature file is absent.
    pub fn build_from_dir(dir: impl AsRef<Path>, model: &Datr) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = load_manifest(dir.join("manifest.jsonl"))?;
        let missing: Vec<String> = manifest
            .iter()
            .filter(|m| !dir.join(&m.feature_path).is_file())
            .map(|m| m.video_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFeatures(missing));
        }
        let videos = manifest
            .into_iter()
            .map(|m| {
                Ok(VideoRecord {
                    frames: read_frame_features(dir.join(&m.feature_path))?,
                    video_id: m.video_id,
                    source_id: m.source_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(&videos, model)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn checkpoint_digest(&self) -> &[u8; 32] {
        &self.checkpoint
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.d..(i + 1) * self.d]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn embedding(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.row(i))
    }

    /// Dot product of `query` with every row.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.d {
            return Err(Error::Shape {
                op: "index scores",
                lhs: vec![query.len()],
                rhs: vec![self.d],
            });
        }
        Ok(self.matrix.chunks_exact(self.d).map(|row| dot(row, query)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.ids.len() * (16 + 8 * self.d));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&self.checkpoint);
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], label: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, label);
        if r.take(6, "magic")? != INDEX_MAGIC {
            return Err(r.error_at(0, "bad magic, expected DATRI"));
        }
        let version = r.u16("version")?;
        if version != INDEX_VERSION {
            return Err(r.error_at(6, format!("unsupported version {version}")));
        }
        let n = r.u32("row count")? as usize;
        let d = r.u32("dimension")? as usize;
        let mut checkpoint = [0u8; 32];
        checkpoint.copy_from_slice(r.take(32, "checkpoint hash")?);
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let at = r.pos as u64;
            let len = r.u32("id length")? as usize;
            let raw = r.take(len, "id")?;
            let id = std::str::from_utf8(raw).map_err(|_| r.error_at(at, "id is not UTF-8"))?;
            ids.push(id.to_owned());
        }
        let at = r.pos as u64;
        let scalars = n * d;
        let width = match r.remaining() {
            rem if rem == scalars * 8 => 8,
            rem if rem == scalars * 4 => 4,
            rem => {
                return Err(r.error_at(
                    at,
                    format!("payload of {rem} bytes fits neither f64 nor f32 rows for {n}x{d}"),
                ))
            }
        };
        let payload = r.take(scalars * width, "rows")?;
        let matrix = if width == 8 {
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        } else {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        };
        Self::new(ids, matrix, d, checkpoint).map_err(|e| Error::format(label, at, e.to_string()))
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
}

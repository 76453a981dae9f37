//! Corpus schemas, the frame-feature file format, the synthetic generator and
//! corpus validation.

pub mod features;
pub mod synthetic;
pub mod triplets;
mod validate;

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use features::{decode_features, encode_features, read_frame_features, write_frame_features};
pub use synthetic::{generate_synthetic_corpus, write_corpus, SyntheticCorpus, SyntheticSpec};
pub use triplets::{load_triplets, parse_triplets, write_triplets, TripletRecord};
pub use validate::{validate_corpus, ValidationReport, Violation, ViolationKind};

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative to the corpus directory.
    pub feature_path: String,
    pub source_id: String,
}

/// A video's frame matrix (`n_frames × d_in`) and its source group.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub source_id: String,
    pub frames: Tensor,
}

/// Triplets plus the videos they reference, videos sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    triplets: Vec<TripletRecord>,
    videos: Vec<VideoRecord>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    /// Checks id uniqueness, a uniform finite frame shape and that every
    /// triplet resolves to a video.
    pub fn new(triplets: Vec<TripletRecord>, mut videos: Vec<VideoRecord>) -> Result<Self> {
        videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let mut by_id = BTreeMap::new();
        for (i, v) in videos.iter().enumerate() {
            if by_id.insert(v.video_id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate video id `{}`", v.video_id)));
            }
            if v.frames.shape().len() != 2 || v.frames.shape() != videos[0].frames.shape() {
                return Err(Error::Shape {
                    op: "corpus frames",
                    lhs: videos[0].frames.shape().to_vec(),
                    rhs: v.frames.shape().to_vec(),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for t in &triplets {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Config(format!("duplicate triplet id `{}`", t.id)));
            }
            if !by_id.contains_key(&t.video_id) {
                return Err(Error::UnknownVideo(t.video_id.clone()));
            }
        }
        Ok(Self { triplets, videos, by_id })
    }

    /// Reads `manifest.jsonl`, every referenced feature file and `triplets.jsonl`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = load_manifest(dir.join("manifest.jsonl"))?;
        let mut missing = Vec::new();
        let mut videos = Vec::with_capacity(manifest.len());
        for entry in &manifest {
            let path = dir.join(&entry.feature_path);
            if !path.is_file() {
                missing.push(entry.video_id.clone());
                continue;
            }
            videos.push(VideoRecord {
                video_id: entry.video_id.clone(),
                source_id: entry.source_id.clone(),
                frames: read_frame_features(&path)?,
            });
        }
        if !missing.is_empty() {
            return Err(Error::MissingFeatures(missing));
        }
        let tpath = dir.join("triplets.jsonl");
        let triplets = load_triplets(&tpath)?;
        let known: BTreeSet<&str> = manifest.iter().map(|m| m.video_id.as_str()).collect();
        triplets::check_references(&triplets, |v| known.contains(v), &tpath.display().to_string())?;
        Self::new(triplets, videos)
    }

    pub fn triplets(&self) -> &[TripletRecord] {
        &self.triplets
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.by_id.get(id).map(|&i| &self.videos[i])
    }

    /// `(n_frames, d_in)`, or `None` for an empty corpus.
    pub fn frame_shape(&self) -> Option<(usize, usize)> {
        self.videos.first().map(|v| (v.frames.rows(), v.frames.cols()))
    }

    pub fn sources(&self) -> BTreeSet<&str> {
        self.videos.iter().map(|v| v.source_id.as_str()).collect()
    }

    /// Sub-corpus holding the listed videos and the triplets that point at them.
    pub fn subset(&self, video_ids: &BTreeSet<String>) -> Self {
        let videos: Vec<VideoRecord> = self
            .videos
            .iter()
            .filter(|v| video_ids.contains(&v.video_id))
            .cloned()
            .collect();
        let triplets = self
            .triplets
            .iter()
            .filter(|t| video_ids.contains(&t.video_id))
            .cloned()
            .collect();
        Self::new(triplets, videos).expect("subset of a valid corpus is valid")
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn parse_manifest(text: &str, label: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: label.to_owned(),
            line: i + 1,
            message,
        };
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !seen.insert(entry.video_id.clone()) {
            return Err(err(format!("duplicate video id `{}`", entry.video_id)));
        }
        out.push(entry);
    }
    Ok(out)
}

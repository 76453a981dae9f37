use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use super::{parse_manifest, parse_triplets, read_frame_features};
use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A file that should exist is missing or unreadable.
    Io,
    /// A JSONL line failed to parse or broke a schema rule.
    Schema,
    /// A binary file has a bad header, truncated payload or non-finite values.
    Format,
    /// Something points at an entry that does not exist.
    DanglingReference,
    /// Frame matrices disagree in shape.
    Shape,
    /// The corpus cannot be split into disjoint source groups.
    SplitFeasibility,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub path: String,
    pub detail: String,
}

/// Summary counts plus every problem found; an empty `violations` list means the
/// corpus loads cleanly.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub videos: usize,
    pub triplets: usize,
    pub sources: usize,
    pub frame_shape: Option<(usize, usize)>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, path: impl AsRef<Path>, detail: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        });
    }
}

/// Checks a corpus directory without stopping at the first problem.
pub fn validate_corpus(dir: impl AsRef<Path>) -> ValidationReport {
    let dir = dir.as_ref();
    let mut report = ValidationReport::default();

    let mpath = dir.join("manifest.jsonl");
    let manifest = match std::fs::read_to_string(&mpath) {
        Ok(text) => match parse_manifest(&text, &mpath.display().to_string()) {
            Ok(m) => m,
            Err(e) => {
                report.push(ViolationKind::Schema, &mpath, e.to_string());
                Vec::new()
            }
        },
        Err(e) => {
            report.push(ViolationKind::Io, &mpath, e.to_string());
            Vec::new()
        }
    };
    report.videos = manifest.len();
    report.sources = manifest.iter().map(|m| m.source_id.as_str()).collect::<BTreeSet<_>>().len();

    for entry in &manifest {
        let fpath = dir.join(&entry.feature_path);
        if !fpath.is_file() {
            report.push(
                ViolationKind::DanglingReference,
                &fpath,
                format!("video `{}` has no feature file", entry.video_id),
            );
            continue;
        }
        match read_frame_features(&fpath) {
            Ok(frames) => {
                let shape = (frames.rows(), frames.cols());
                match report.frame_shape {
                    None => report.frame_shape = Some(shape),
                    Some(expected) if expected != shape => report.push(
                        ViolationKind::Shape,
                        &fpath,
                        format!("{}x{} frames, expected {}x{}", shape.0, shape.1, expected.0, expected.1),
                    ),
                    Some(_) => {}
                }
            }
            Err(e @ Error::Io { .. }) => report.push(ViolationKind::Io, &fpath, e.to_string()),
            Err(e) => report.push(ViolationKind::Format, &fpath, e.to_string()),
        }
    }

    let tpath = dir.join("triplets.jsonl");
    match std::fs::read_to_string(&tpath) {
        Ok(text) => match parse_triplets(&text, &tpath.display().to_string()) {
            Ok(triplets) => {
                report.triplets = triplets.len();
                let known: BTreeSet<&str> = manifest.iter().map(|m| m.video_id.as_str()).collect();
                for t in &triplets {
                    if !known.contains(t.video_id.as_str()) {
                        report.push(
                            ViolationKind::DanglingReference,
                            &tpath,
                            format!("triplet `{}` references unknown video `{}`", t.id, t.video_id),
                        );
                    }
                }
            }
            Err(e) => report.push(ViolationKind::Schema, &tpath, e.to_string()),
        },
        Err(e) => report.push(ViolationKind::Io, &tpath, e.to_string()),
    }

    if report.sources < 2 {
        report.push(
            ViolationKind::SplitFeasibility,
            dir,
            format!("{} distinct source(s); a grouped split needs at least 2", report.sources),
        );
    }
    report
}

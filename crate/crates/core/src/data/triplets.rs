use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(q1, d_v, q2)` training/evaluation item tied to a video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub id: String,
    pub video_id: String,
    /// Initial coarse query.
    pub q1: String,
    /// Video-grounded description; kept for traceability, never fed to the model.
    #[serde(default)]
    pub d_v: String,
    /// Refined follow-up query.
    pub q2: String,
    pub source_id: String,
}

/// Parses JSONL triplets, one record per non-blank line.
///
/// Rejects malformed lines, empty queries and duplicate ids; errors carry the
/// 1-based line number.
pub fn parse_triplets(text: &str, label: &str) -> Result<Vec<TripletRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: label.to_owned(),
            line: line_no,
            message,
        };
        let rec: TripletRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.q1.trim().is_empty() {
            return Err(err("field `q1` is empty".into()));
        }
        if rec.q2.trim().is_empty() {
            return Err(err("field `q2` is empty".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate triplet id `{}`", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_triplets(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triplets(&text, &path.display().to_string())
}

/// Ensures every triplet points at a known video; reports the first dangling line.
pub fn check_references<'a>(
    triplets: &[TripletRecord],
    known: impl Fn(&str) -> bool + 'a,
    label: &str,
) -> Result<()> {
    for (i, t) in triplets.iter().enumerate() {
        if !known(&t.video_id) {
            return Err(Error::Parse {
                path: label.to_owned(),
                line: i + 1,
                message: format!("triplet `{}` references unknown video `{}`", t.id, t.video_id),
            });
        }
    }
    Ok(())
}

pub fn triplets_to_jsonl(triplets: &[TripletRecord]) -> String {
    let mut s = String::new();
    for t in triplets {
        s.push_str(&serde_json::to_string(t).expect("triplet serializes"));
        s.push('\n');
    }
    s
}

pub fn write_triplets(path: impl AsRef<Path>, triplets: &[TripletRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(triplets_to_jsonl(triplets).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"a","video_id":"v1","q1":"squat","d_v":"","q2":"squat wall","source_id":"s"}"#;

    #[test]
    fn empty_and_single() {
        assert!(parse_triplets("", "t").unwrap().is_empty());
        let recs = parse_triplets(LINE, "t").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].q2, "squat wall");
        assert_eq!(parse_triplets(&triplets_to_jsonl(&recs), "t").unwrap(), recs);
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let text = format!("{LINE}\n{}", r#"{"id":"b","video_id":"v1","q1":"x","d_v":"","source_id":"s"}"#);
        let err = parse_triplets(&text, "t.jsonl").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{msg}");
        assert!(msg.contains("q2"), "{msg}");
    }

    #[test]
    fn malformed_and_duplicates() {
        assert!(matches!(
            parse_triplets("{not json", "t"),
            Err(Error::Parse { line: 1, .. })
        ));
        let text = format!("{LINE}\n\n{LINE}");
        assert!(matches!(parse_triplets(&text, "t"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn dangling_reference() {
        let recs = parse_triplets(LINE, "t").unwrap();
        assert!(check_references(&recs, |v| v == "v1", "t").is_ok());
        let err = check_references(&recs, |_| false, "t").unwrap_err();
        assert!(err.to_string().contains("unknown video `v1`"));
    }
}

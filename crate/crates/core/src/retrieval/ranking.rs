use std::cmp::Ordering;

use serde::Serialize;

use super::EmbeddingIndex;
use crate::error::{Error, Result};
use crate::model::{Datr, FusionMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedEntry {
    pub video_id: String,
    /// Cosine similarity to the first query.
    pub stage1_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_score: Option<f64>,
}

/// Ranked candidates, best first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedList {
    pub stage: Stage,
    pub entries: Vec<RankedEntry>,
    /// Set when more results were requested than there were candidates.
    pub clamped: bool,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.video_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The first `m` entries, same stage.
    pub fn head(&self, m: usize) -> RankedList {
        RankedList {
            stage: self.stage,
            entries: self.entries.iter().take(m).cloned().collect(),
            clamped: m > self.entries.len(),
        }
    }
}

/// Higher score first, then smaller id.
pub fn stage1_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Higher re-rank score first, then higher cosine, then smaller id.
pub fn stage2_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    let (sa, sb) = (a.stage2_score.unwrap_or(f64::NEG_INFINITY), b.stage2_score.unwrap_or(f64::NEG_INFINITY));
    sb.total_cmp(&sa)
        .then_with(|| b.stage1_score.total_cmp(&a.stage1_score))
        .then_with(|| a.video_id.cmp(&b.video_id))
}

/// Exact top-`min(k, N)` rows for an already-encoded query.
pub fn stage1_from_embedding(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Contract("K must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let scores = index.scores(query)?;
    let ids = index.ids();
    let cmp = |&a: &usize, &b: &usize| stage1_order(scores[a], &ids[a], scores[b], &ids[b]);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let keep = k.min(order.len());
    if keep < order.len() {
        order.select_nth_unstable_by(keep - 1, cmp);
        order.truncate(keep);
    }
    order.sort_unstable_by(cmp);
    Ok(RankedList {
        stage: Stage::Stage1,
        entries: order
            .into_iter()
            .map(|i| RankedEntry {
                video_id: ids[i].clone(),
                stage1_score: scores[i],
                stage2_score: None,
            })
            .collect(),
        clamped: false,
    })
}

/// Reference ranking: scores every row with a plain loop and fully sorts by
/// score then id. Slow on purpose; used to verify the selection path.
pub fn brute_force_top_k(index: &EmbeddingIndex, query: &[f64], k: usize) -> Vec<String> {
    let mut all: Vec<(f64, &str)> = (0..index.len())
        .map(|i| {
            let mut s = 0.0;
            for (a, b) in index.row(i).iter().zip(query) {
                s += a * b;
            }
            (s, index.ids()[i].as_str())
        })
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    all.into_iter().take(k).map(|(_, id)| id.to_owned()).collect()
}

/// Cosine top-`K` for a first query.
pub fn stage1_retrieve(model: &Datr, index: &EmbeddingIndex, q1: &str, k: usize) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let z = model.encode_text(q1)?;
    stage1_from_embedding(index, &z, k)
}

/// Scores every candidate against an already-fused query and keeps the best `m`.
pub fn stage2_from_fused(
    model: &Datr,
    index: &EmbeddingIndex,
    fused: &[f64],
    candidates: &RankedList,
    m: usize,
) -> Result<RankedList> {
    if m == 0 {
        return Err(Error::Contract("M must be at least 1".into()));
    }
    let d = index.dim();
    let mut rows = Vec::with_capacity(candidates.len() * d);
    for e in &candidates.entries {
        let row = index
            .embedding(&e.video_id)
            .ok_or_else(|| Error::UnknownVideo(e.video_id.clone()))?;
        rows.extend_from_slice(row);
    }
    let scores = model.rerank_scores(fused, &rows)?;
    let mut entries: Vec<RankedEntry> = candidates
        .entries
        .iter()
        .zip(scores)
        .map(|(e, s)| RankedEntry {
            stage2_score: Some(s),
            ..e.clone()
        })
        .collect();
    entries.sort_by(stage2_order);
    let clamped = m > entries.len();
    entries.truncate(m);
    Ok(RankedList {
        stage: Stage::Stage2,
        entries,
        clamped,
    })
}

/// Fuses `q1` with the refinement `q2` and re-ranks the stage-I candidates.
pub fn stage2_rerank(
    model: &Datr,
    index: &EmbeddingIndex,
    q1: &str,
    q2: &str,
    candidates: &RankedList,
    m: usize,
    mode: FusionMode,
) -> Result<RankedList> {
    let fused = model.fuse(&model.encode_text(q1)?, &model.encode_text(q2)?, mode)?;
    stage2_from_fused(model, index, &fused, candidates, m)
}

use serde::{Deserialize, Serialize};

use super::ranking::{stage1_from_embedding, stage1_retrieve, stage2_from_fused, stage2_rerank, RankedList};
use super::EmbeddingIndex;
use crate::error::{Error, Result};
use crate::model::{Datr, FusionMode};

/// Knobs for one retrieval turn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stage-I candidate count.
    pub k: usize,
    /// Results returned to the caller.
    pub m: usize,
    pub stage2: bool,
    pub fusion: FusionMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 100,
            m: 10,
            stage2: true,
            fusion: FusionMode::Full,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config(format!("K = {} and M = {} must both be at least 1", self.k, self.m)));
        }
        Ok(())
    }
}

/// Conversation state for one search session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionState {
    pub session_id: String,
    /// Every query so far; the first is the coarse query.
    pub turns: Vec<String>,
    /// Stage-I candidates for the first query.
    pub candidates: Option<RankedList>,
    pub last: Option<RankedList>,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            ..Self::default()
        }
    }
}

/// Runs one turn and records it in `session`.
///
/// The first turn returns the head of the stage-I list. Later turns keep the
/// first query's candidates and re-rank them with the first query fused with
/// the newest one. A failed turn leaves the session untouched.
pub fn run_pipeline(
    session: &mut SessionState,
    query: &str,
    model: &Datr,
    index: &EmbeddingIndex,
    config: &PipelineConfig,
) -> Result<RankedList> {
    config.validate()?;
    if query.trim().is_empty() {
        return Err(Error::Contract("query is empty".into()));
    }
    let (candidates, result) = match session.turns.first() {
        None => {
            let r1 = stage1_retrieve(model, index, query, config.k)?;
            let head = r1.head(config.m);
            (r1, head)
        }
        Some(q1) => {
            // Cached candidates are reused unless this turn asks for a different K.
            let r1 = match &session.candidates {
                Some(c) if c.len() == config.k.min(index.len()) => c.clone(),
                _ => stage1_retrieve(model, index, q1, config.k)?,
            };
            let out = if config.stage2 {
                stage2_rerank(model, index, q1, query, &r1, config.m, config.fusion)?
            } else {
                r1.head(config.m)
            };
            (r1, out)
        }
    };
    session.turns.push(query.to_owned());
    session.candidates = Some(candidates);
    session.last = Some(result.clone());
    Ok(result)
}

/// Total ranking of every indexed video for a two-turn query.
///
/// Stage II, when on, reorders the stage-I top `k`; everything below keeps its
/// stage-I order.
pub fn rank_all(
    model: &Datr,
    index: &EmbeddingIndex,
    q1: &str,
    q2: &str,
    config: &PipelineConfig,
) -> Result<Vec<String>> {
    let z1 = model.encode_text(q1)?;
    let full = stage1_from_embedding(index, &z1, index.len())?;
    if !config.stage2 {
        return Ok(full.ids().map(str::to_owned).collect());
    }
    let z2 = model.encode_text(q2)?;
    let fused = model.fuse(&z1, &z2, config.fusion)?;
    let k = config.k.min(full.len());
    let head = full.head(k);
    let reranked = stage2_from_fused(model, index, &fused, &head, k)?;
    Ok(reranked
        .ids()
        .chain(full.entries[k..].iter().map(|e| e.video_id.as_str()))
        .map(str::to_owned)
        .collect())
}

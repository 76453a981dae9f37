//! Retrieval metrics, source-grouped splitting and the ablation runner.

mod ablation;
mod metrics;
mod split;


pub use ablation::{
    ablation_rows, ablation_suite, train_seed_run, AblationEntry, AblationRow, AblationTable, ModelKey, RerankScope,
    SeedRun,
};
pub use metrics::{compute_metrics, rank_of_truth, EvalResult, RECALL_KS};
pub use split::{grouped_split, Split, SPLIT_TOLERANCE, TEST_FRACTION};

use crate::data::TripletRecord;
use crate::error::Result;
use crate::model::Datr;
use crate::retrieval::{rank_all, EmbeddingIndex, PipelineConfig};

/// Ranks every indexed video for each triplet's `(q1, q2)` dialogue and
/// summarizes where the ground truth landed.
///
/// With Stage II on, the stage-I top `K` is re-ranked and the rest keeps its
/// stage-I order below it. Triplets whose video is absent from the index are
/// counted in `skipped`.
pub fn evaluate(
    model: &Datr,
    index: &EmbeddingIndex,
    triplets: &[TripletRecord],
    config: &PipelineConfig,
) -> Result<EvalResult> {
    config.validate()?;
    let mut ranks = Vec::with_capacity(triplets.len());
    let mut skipped = 0;
    for t in triplets {
        if index.position(&t.video_id).is_none() {
            skipped += 1;
            continue;
        }
        let ranking = rank_all(model, index, &t.q1, &t.q2, config)?;
        ranks.push(rank_of_truth(&ranking, &t.video_id)?);
    }
    let mut result = compute_metrics(&ranks)?;
    result.skipped = skipped;
    result.config = describe(config);
    Ok(result)
}

pub fn describe(config: &PipelineConfig) -> String {
    if config.stage2 {
        format!("stage2=on fusion={} K={}", config.fusion, config.k)
    } else {
        "stage2=off".to_owned()
    }
}

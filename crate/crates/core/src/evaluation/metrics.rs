use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cut-offs reported as `R@K`.
pub const RECALL_KS: [usize; 5] = [1, 5, 10, 50, 100];

/// Aggregate retrieval quality over a query set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction of queries whose truth is within the top `K`.
    pub recall_at: BTreeMap<usize, f64>,
    pub med_rank: f64,
    pub mean_rank: f64,
    pub n_queries: usize,
    /// Queries dropped because their video was not in the index.
    #[serde(default)]
    pub skipped: usize,
    #[serde(default)]
    pub config: String,
}

impl EvalResult {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Element-wise mean of several results (used for seed averaging).
    pub fn mean_of(results: &[EvalResult]) -> Result<EvalResult> {
        let first = results
            .first()
            .ok_or_else(|| Error::Contract("cannot average zero results".into()))?;
        let n = results.len() as f64;
        let avg = |f: &dyn Fn(&EvalResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        Ok(EvalResult {
            recall_at: first.recall_at.keys().map(|&k| (k, avg(&|r| r.recall(k)))).collect(),
            med_rank: avg(&|r| r.med_rank),
            mean_rank: avg(&|r| r.mean_rank),
            n_queries: results.iter().map(|r| r.n_queries).sum(),
            skipped: results.iter().map(|r| r.skipped).sum(),
            config: first.config.clone(),
        })
    }
}

/// 1-based position of `truth` in a ranking.
pub fn rank_of_truth<S: AsRef<str>>(ranking: &[S], truth: &str) -> Result<usize> {
    ranking
        .iter()
        .position(|id| id.as_ref() == truth)
        .map(|p| p + 1)
        .ok_or_else(|| Error::UnknownVideo(truth.to_owned()))
}

/// Recall at every cut-off in [`RECALL_KS`], median rank (mean of the middle
/// two for an even count) and mean rank.
pub fn compute_metrics(ranks: &[usize]) -> Result<EvalResult> {
    if ranks.is_empty() {
        return Err(Error::Contract("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    let n = ranks.len();
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let med_rank = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let recall_at = RECALL_KS
        .iter()
        .map(|&k| (k, sorted.partition_point(|&r| r <= k) as f64 / n as f64))
        .collect();
    Ok(EvalResult {
        recall_at,
        med_rank,
        mean_rank: ranks.iter().map(|&r| r as f64).sum::<f64>() / n as f64,
        n_queries: n,
        skipped: 0,
        config: String::new(),
    })
}

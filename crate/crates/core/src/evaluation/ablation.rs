use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use super::{evaluate, grouped_split, EvalResult, RECALL_KS};
use crate::data::Corpus;
use crate::error::Result;
use crate::model::{Datr, FusionMode, ModelConfig};
use crate::retrieval::{EmbeddingIndex, PipelineConfig};
use crate::training::{build_vocab, train_stage1, train_stage2, ContrastiveLoss, TrainConfig};

/// Which trained model a row needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ModelKey {
    pub loss: ContrastiveLoss,
    pub fusion: FusionMode,
}

/// How many stage-I candidates Stage II re-ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankScope {
    /// The configured `K`.
    TopK,
    /// `ceil(percent/100 · N)` of the indexed videos.
    Share(u8),
    /// Every indexed video.
    Full,
}

impl RerankScope {
    pub fn candidates(self, k: usize, n: usize) -> usize {
        match self {
            RerankScope::TopK => k,
            RerankScope::Share(p) => (p as usize * n).div_ceil(100).max(1),
            RerankScope::Full => n.max(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub block: &'static str,
    pub name: &'static str,
    pub model: ModelKey,
    pub stage2: bool,
    pub scope: RerankScope,
}

const FULL: ModelKey = ModelKey {
    loss: ContrastiveLoss::Bidirectional,
    fusion: FusionMode::Full,
};

/// One row per design choice, grouped in blocks; the first row is the
/// reference system.
pub fn ablation_rows() -> Vec<AblationRow> {
    let row = |block, name, model, stage2, scope| AblationRow {
        block,
        name,
        model,
        stage2,
        scope,
    };
    let with_fusion = |fusion| ModelKey { fusion, ..FULL };
    vec![
        row("reference", "DATR (full)", FULL, true, RerankScope::TopK),
        row("two-stage", "Without Stage II", FULL, false, RerankScope::TopK),
        row("fusion", "Add only", with_fusion(FusionMode::Add), true, RerankScope::TopK),
        row("fusion", "Mul only", with_fusion(FusionMode::Mul), true, RerankScope::TopK),
        row(
            "loss",
            "Text-to-video only",
            ModelKey {
                loss: ContrastiveLoss::TextToVideo,
                fusion: FusionMode::Full,
            },
            true,
            RerankScope::TopK,
        ),
        row("rerank scope", "Top 40% re-rank", FULL, true, RerankScope::Share(40)),
        row("rerank scope", "Full-corpus re-rank", FULL, true, RerankScope::Full),
    ]
}

/// Everything trained for one seed: the held-out side of its split and one
/// model per configuration.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub test: Corpus,
    pub models: BTreeMap<ModelKey, Datr>,
}

/// Splits by source, trains Stage I once per loss and Stage II once per key on
/// top of it, all seeded with `seed`.
pub fn train_seed_run(
    corpus: &Corpus,
    seed: u64,
    model_config: &ModelConfig,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    keys: &[ModelKey],
) -> Result<SeedRun> {
    let split = grouped_split(corpus, seed)?;
    let train = corpus.subset(&split.train);
    let test = corpus.subset(&split.test);
    let vocab = build_vocab(&train);

    let mut encoders: BTreeMap<ContrastiveLoss, Datr> = BTreeMap::new();
    let mut models = BTreeMap::new();
    for key in keys {
        if !encoders.contains_key(&key.loss) {
            let mut m = Datr::new(model_config.clone(), vocab.clone(), seed)?;
            let cfg = TrainConfig {
                seed,
                loss: key.loss,
                ..stage1.clone()
            };
            train_stage1(&mut m, &train, None, &cfg)?;
            encoders.insert(key.loss, m);
        }
        let mut m = encoders[&key.loss].clone();
        let cfg = TrainConfig {
            seed,
            fusion: key.fusion,
            ..stage2.clone()
        };
        train_stage2(&mut m, &train, &cfg)?;
        models.insert(*key, m);
    }
    Ok(SeedRun { seed, test, models })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationEntry {
    #[serde(flatten)]
    pub row: AblationRow,
    /// Seed-averaged metrics; `None` when some seed lacks the model.
    pub result: Option<EvalResult>,
    pub per_seed: Vec<EvalResult>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub k: usize,
    pub entries: Vec<AblationEntry>,
}

/// Evaluates every row on every seed's held-out split.
pub fn ablation_suite(runs: &[SeedRun], rows: &[AblationRow], base: &PipelineConfig) -> Result<AblationTable> {
    let mut indexes: BTreeMap<(usize, ModelKey), EmbeddingIndex> = BTreeMap::new();
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        let mut per_seed = Vec::new();
        let mut complete = true;
        for (i, run) in runs.iter().enumerate() {
            let Some(model) = run.models.get(&row.model) else {
                complete = false;
                continue;
            };
            if !indexes.contains_key(&(i, row.model)) {
                indexes.insert((i, row.model), EmbeddingIndex::build(run.test.videos(), model)?);
            }
            let index = &indexes[&(i, row.model)];
            let config = PipelineConfig {
                k: row.scope.candidates(base.k, index.len()),
                stage2: row.stage2,
                fusion: row.model.fusion,
                ..*base
            };
            per_seed.push(evaluate(model, index, run.test.triplets(), &config)?);
        }
        let result = if complete && !per_seed.is_empty() {
            Some(EvalResult::mean_of(&per_seed)?)
        } else {
            None
        };
        entries.push(AblationEntry {
            row: *row,
            result,
            per_seed,
        });
    }
    Ok(AblationTable {
        seeds: runs.iter().map(|r| r.seed).collect(),
        k: base.k,
        entries,
    })
}

impl AblationTable {
    pub fn entry(&self, name: &str) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.row.name == name)
    }

    /// Aligned plain-text rendering; recalls in percent.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Block".to_owned(), "Variant".to_owned()];
        header.extend(RECALL_KS.iter().map(|k| format!("R@{k}")));
        header.extend(["MedR".to_owned(), "MeanR".to_owned()]);
        let mut lines = vec![header];
        for e in &self.entries {
            let mut cells = vec![e.row.block.to_owned(), e.row.name.to_owned()];
            match &e.result {
                Some(r) => {
                    cells.extend(RECALL_KS.iter().map(|&k| format!("{:.1}", 100.0 * r.recall(k))));
                    cells.push(format!("{:.1}", r.med_rank));
                    cells.push(format!("{:.2}", r.mean_rank));
                }
                None => cells.extend(std::iter::repeat_n("absent".to_owned(), RECALL_KS.len() + 2)),
            }
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &lines {
            let mut s = String::new();
            for (c, cell) in line.iter().enumerate() {
                if c < 2 {
                    let _ = write!(s, "{cell:<w$}  ", w = widths[c]);
                } else {
                    let _ = write!(s, "{cell:>w$}  ", w = widths[c]);
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        }
        out
    }
}

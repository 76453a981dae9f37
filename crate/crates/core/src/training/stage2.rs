use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batches, collect_grads, diverged, margin_ranking_loss, TrainConfig, TrainReport, TrainStage};
use crate::autodiff::{Bindings, Tape, Tensor};
use crate::data::{Corpus, TripletRecord};
use crate::error::{Error, Result};
use crate::model::{Datr, FusionMode, STAGE2_PREFIXES};
use crate::retrieval::{stage1_from_embedding, EmbeddingIndex};

/// Top `n` stage-I candidates for the triplet's first query, skipping its own
/// video. Returns every non-positive when the index is smaller than `n + 1`.
pub fn mine_hard_negatives(
    model: &Datr,
    index: &EmbeddingIndex,
    triplet: &TripletRecord,
    n: usize,
) -> Result<Vec<String>> {
    let z = model.encode_text(&triplet.q1)?;
    negatives_for(index, &z, &triplet.video_id, n)
}

fn negatives_for(index: &EmbeddingIndex, query: &[f64], positive: &str, n: usize) -> Result<Vec<String>> {
    negatives_excluding(index, query, |id| id == positive, n)
}

/// Top `n` stage-I candidates that `is_answer` does not claim.
fn negatives_excluding(
    index: &EmbeddingIndex,
    query: &[f64],
    is_answer: impl Fn(&str) -> bool,
    n: usize,
) -> Result<Vec<String>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let ranked = stage1_from_embedding(index, query, index.len())?;
    Ok(ranked
        .ids()
        .filter(|id| !is_answer(id))
        .take(n)
        .map(str::to_owned)
        .collect())
}

/// Frozen Stage-I embeddings and mined negatives for every training triplet.
#[derive(Clone, Debug)]
pub struct Stage2Data {
    pub first: Vec<Vec<f64>>,
    pub refined: Vec<Vec<f64>>,
    /// Index rows: positive first, then its top hard negatives.
    pub rows: Vec<Vec<usize>>,
    /// Candidate pool each positive's training negatives are drawn from.
    pub pool: Vec<Vec<usize>>,
    pub index: EmbeddingIndex,
}

impl Stage2Data {
    /// Mines `n_negatives` fixed negatives and a pool of the top `pool_size`
    /// non-answers per triplet (never smaller than `n_negatives`).
    pub fn prepare(model: &Datr, train: &Corpus, n_negatives: usize, pool_size: usize) -> Result<Self> {
        let index = EmbeddingIndex::build(train.videos(), model)?;
        // Videos that are the ground truth of an identical dialogue answer it
        // too; they are not negatives for each other.
        let mut answers: HashMap<(&str, &str), HashSet<&str>> = HashMap::new();
        for t in train.triplets() {
            answers.entry((&t.q1, &t.q2)).or_default().insert(&t.video_id);
        }
        let mut first = Vec::new();
        let mut refined = Vec::new();
        let mut rows = Vec::new();
        let mut pool = Vec::new();
        for t in train.triplets() {
            let z1 = model.encode_text(&t.q1)?;
            let pos = index.position(&t.video_id).ok_or_else(|| Error::UnknownVideo(t.video_id.clone()))?;
            let same = &answers[&(t.q1.as_str(), t.q2.as_str())];
            let candidates: Vec<usize> =
                negatives_excluding(&index, &z1, |id| same.contains(id), pool_size.max(n_negatives))?
                    .iter()
                    .map(|id| index.position(id).expect("mined from this index"))
                    .collect();
            rows.push(std::iter::once(pos).chain(candidates.iter().take(n_negatives).copied()).collect());
            pool.push(candidates);
            refined.push(model.encode_text(&t.q2)?);
            first.push(z1);
        }
        Ok(Self {
            first,
            refined,
            rows,
            pool,
            index,
        })
    }

    /// Positive followed by `n` negatives drawn without replacement from each
    /// triplet's pool.
    pub fn sample_rows(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        self.rows
            .iter()
            .zip(&self.pool)
            .map(|(r, pool)| std::iter::once(r[0]).chain(pool.choose_multiple(rng, n).copied()).collect())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean positive score minus mean negative score under the current weights.
    pub fn score_gap(&self, model: &Datr, mode: FusionMode) -> Result<f64> {
        let (mut pos, mut neg, mut n_pos, mut n_neg) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..self.len() {
            let zf = model.fuse(&self.first[i], &self.refined[i], mode)?;
            let flat: Vec<f64> = self.rows[i].iter().flat_map(|&r| self.index.row(r).to_vec()).collect();
            let s = model.rerank_scores(&zf, &flat)?;
            pos += s[0];
            n_pos += 1;
            neg += s[1..].iter().sum::<f64>();
            n_neg += s.len() - 1;
        }
        Ok(pos / n_pos.max(1) as f64 - neg / n_neg.max(1) as f64)
    }
}

pub(super) fn batch_loss(
    model: &Datr,
    data: &Stage2Data,
    rows: &[Vec<usize>],
    tape: &mut Tape,
    p: &mut Bindings,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<Option<crate::autodiff::Var>> {
    let d = model.config().d;
    let rows_of = |v: &[Vec<f64>]| -> Vec<f64> { batch.iter().flat_map(|&i| v[i].iter().copied()).collect() };
    let z1 = tape.constant(Tensor::new([batch.len(), d], rows_of(&data.first))?);
    let z2 = tape.constant(Tensor::new([batch.len(), d], rows_of(&data.refined))?);
    let zf = model.fusion().forward(tape, p, z1, z2, config.fusion)?;

    let (mut owner, mut video, mut pos_at, mut neg_at) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (b, &i) in batch.iter().enumerate() {
        let base = owner.len();
        for (j, &r) in rows[i].iter().enumerate() {
            owner.push(b);
            video.extend_from_slice(data.index.row(r));
            if j > 0 {
                pos_at.push(base);
                neg_at.push(base + j);
            }
        }
    }
    if neg_at.is_empty() {
        return Ok(None);
    }
    let zf_rows = tape.gather_rows(zf, &owner)?;
    let zv = tape.constant(Tensor::new([owner.len(), d], video)?);
    let scores = model.reranker().forward(tape, p, zf_rows, zv)?;
    let pos = tape.gather_rows(scores, &pos_at)?;
    let neg = tape.gather_rows(scores, &neg_at)?;
    margin_ranking_loss(tape, pos, neg, config.margin).map(Some)
}

/// Trains fusion and re-ranker with a margin loss. Every epoch draws fresh
/// negatives from each positive's stage-I candidate pool.
/// Text and video encoders and the temperature stay bit-identical.
pub fn train_stage2(model: &mut Datr, train: &Corpus, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let start = Instant::now();
    let data = Stage2Data::prepare(model, train, config.hard_negatives, config.negative_pool)?;
    if data.len() < 2 {
        return Err(Error::Contract("stage II needs at least two training triplets".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut initial = (0.0, 0usize);
    for b in batches(&order, config.batch_size) {
        let mut tape = Tape::new();
        let mut p = Bindings::frozen(model.params());
        if let Some(l) = batch_loss(model, &data, &data.rows, &mut tape, &mut p, b, config)? {
            initial.0 += tape.value(l).data()[0];
            initial.1 += 1;
        }
    }
    let mut score_gap_curve = vec![data.score_gap(model, config.fusion)?];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = config.optimizer(model.params().len());
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut order = order;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let rows = data.sample_rows(config.hard_negatives, &mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for b in batches(&order, config.batch_size) {
            let step = adam.steps() as usize;
            let mut tape = Tape::new();
            let mut p = Bindings::with_trainable(model.params(), &STAGE2_PREFIXES);
            let Some(loss) = batch_loss(model, &data, &rows, &mut tape, &mut p, b, config).map_err(|e| diverged(epoch, step, e))?
            else {
                continue;
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            tape.backward(loss).map_err(|e| diverged(epoch, step, e))?;
            let grads = collect_grads(&tape, &p);
            drop(p);
            adam.update(model.params_mut(), &grads);
            total += value;
            count += 1;
        }
        loss_curve.push(total / count.max(1) as f64);
        score_gap_curve.push(data.score_gap(model, config.fusion)?);
    }
    Ok(TrainReport {
        stage: TrainStage::Stage2,
        seed: config.seed,
        epochs: config.epochs,
        steps: adam.steps() as usize,
        initial_loss: initial.0 / initial.1.max(1) as f64,
        loss_curve,
        heldout_curve: Vec::new(),
        score_gap_curve,
        final_tau: model.temperature(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

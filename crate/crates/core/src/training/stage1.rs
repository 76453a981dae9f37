use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batches, clip_loss, collect_grads, diverged, ContrastiveLoss, TrainConfig, TrainReport, TrainStage};
use crate::autodiff::{Bindings, Tape};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{Datr, STAGE1_PREFIXES, TAU_MAX, TAU_MIN};

pub(super) struct Item<'a> {
    tokens: Vec<usize>,
    frames: &'a crate::autodiff::Tensor,
}

pub(super) fn items<'a>(model: &Datr, corpus: &'a Corpus) -> Vec<Item<'a>> {
    corpus
        .triplets()
        .iter()
        .map(|t| Item {
            tokens: model.tokenize(&t.q1),
            frames: &corpus.video(&t.video_id).expect("corpus resolves its triplets").frames,
        })
        .collect()
}

/// Builds the batch loss on a fresh tape.
pub(super) fn batch_loss(
    model: &Datr,
    tape: &mut Tape,
    p: &mut Bindings,
    batch: &[&Item],
    kind: ContrastiveLoss,
) -> Result<crate::autodiff::Var> {
    let mut text = Vec::with_capacity(batch.len());
    let mut video = Vec::with_capacity(batch.len());
    for item in batch {
        text.push(model.text_encoder().forward(tape, p, &item.tokens)?);
        video.push(model.video_encoder().forward(tape, p, item.frames)?);
    }
    let zt = tape.concat_rows(&text)?;
    let zv = tape.concat_rows(&video)?;
    let tau = model.temperature_var(tape, p)?;
    clip_loss(tape, zt, zv, tau, kind)
}

/// Mean contrastive loss over `corpus` in fixed order, batches of `batch_size`.
pub fn eval_clip_loss(model: &Datr, corpus: &Corpus, batch_size: usize, kind: ContrastiveLoss) -> Result<f64> {
    let all = items(model, corpus);
    let order: Vec<usize> = (0..all.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for b in batches(&order, batch_size.max(2)) {
        let batch: Vec<&Item> = b.iter().map(|&i| &all[i]).collect();
        let mut tape = Tape::new();
        let mut p = Bindings::frozen(model.params());
        let loss = batch_loss(model, &mut tape, &mut p, &batch, kind)?;
        total += tape.value(loss).data()[0];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("need at least two triplets to evaluate a contrastive loss".into()));
    }
    Ok(total / count as f64)
}

/// Trains the text and video encoders and the temperature on `(q1, video)`
/// pairs with in-batch negatives. Fusion and re-ranker weights are untouched.
pub fn train_stage1(
    model: &mut Datr,
    train: &Corpus,
    heldout: Option<&Corpus>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let n = train.triplets().len();
    if n < config.batch_size {
        return Err(Error::Contract(format!(
            "{n} training triplets is fewer than one batch of {}",
            config.batch_size
        )));
    }
    let start = Instant::now();
    let initial_loss = eval_clip_loss(model, train, config.batch_size, config.loss)?;
    let mut heldout_curve = Vec::new();
    if let Some(h) = heldout {
        heldout_curve.push(eval_clip_loss(model, h, config.batch_size, config.loss)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = config.optimizer(model.params().len());
    let log_tau = model.log_tau_id();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let all = items(model, train);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for b in batches(&order, config.batch_size) {
            let step = adam.steps() as usize;
            let batch: Vec<&Item> = b.iter().map(|&i| &all[i]).collect();
            let mut tape = Tape::new();
            let mut p = Bindings::with_trainable(model.params(), &STAGE1_PREFIXES);
            let loss = batch_loss(model, &mut tape, &mut p, &batch, config.loss).map_err(|e| diverged(epoch, step, e))?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            tape.backward(loss).map_err(|e| diverged(epoch, step, e))?;
            let grads = collect_grads(&tape, &p);
            drop(p);
            adam.update(model.params_mut(), &grads);
            let lt = &mut model.params_mut().get_mut(log_tau).data_mut()[0];
            *lt = lt.clamp(TAU_MIN.ln(), TAU_MAX.ln());
            total += value;
            count += 1;
        }
        loss_curve.push(total / count.max(1) as f64);
        if let Some(h) = heldout {
            heldout_curve.push(eval_clip_loss(model, h, config.batch_size, config.loss)?);
        }
    }
    Ok(TrainReport {
        stage: TrainStage::Stage1,
        seed: config.seed,
        epochs: config.epochs,
        steps: adam.steps() as usize,
        initial_loss,
        loss_curve,
        heldout_curve,
        score_gap_curve: Vec::new(),
        final_tau: model.temperature(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

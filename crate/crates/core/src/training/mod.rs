//! Optimization: contrastive Stage-I training of the dual encoders and
//! margin-based Stage-II training of fusion and re-ranker on mined negatives.

mod adam;
mod gradcheck;
mod loss;
mod stage1;
mod stage2;


use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use gradcheck::{check_stage1_gradients, check_stage2_gradients, GradientCheck};
pub use loss::{clip_loss, margin_ranking_loss, ContrastiveLoss};
pub use stage1::{eval_clip_loss, train_stage1};
pub use stage2::{mine_hard_negatives, train_stage2, Stage2Data};

use crate::autodiff::{Bindings, ParamId, Tape};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{FusionMode, Vocab};

/// Vocabulary over every query word of the training triplets.
pub fn build_vocab(train: &Corpus) -> Vocab {
    Vocab::from_texts(train.triplets().iter().flat_map(|t| [t.q1.as_str(), t.q2.as_str()]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub hard_negatives: usize,
    /// Stage-I candidates per positive that Stage II samples negatives from.
    pub negative_pool: usize,
    pub margin: f64,
    pub loss: ContrastiveLoss,
    /// Fusion variant trained in Stage II.
    pub fusion: FusionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            hard_negatives: 7,
            negative_pool: 100,
            margin: 0.2,
            loss: ContrastiveLoss::Bidirectional,
            fusion: FusionMode::Full,
        }
    }
}

impl TrainConfig {
    /// Defaults for Stage II. Its epochs are cheap (encoders are frozen
    /// and embeddings precomputed), so it runs a longer schedule than Stage I.
    pub fn stage2() -> Self {
        Self {
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size = {} but contrastive batches need at least 2", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if self.hard_negatives == 0 {
            return bad("hard_negatives must be at least 1".into());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin = {} must be finite and >= 0", self.margin));
        }
        Ok(())
    }

    fn optimizer(&self, n_params: usize) -> Adam {
        Adam::new(self.learning_rate, self.beta1, self.beta2, self.eps, n_params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Stage1,
    Stage2,
}

/// What happened during a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: TrainStage,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss of each epoch.
    pub loss_curve: Vec<f64>,
    /// Stage I: held-out loss before training and after each epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heldout_curve: Vec<f64>,
    /// Stage II: mean positive score minus mean hard-negative score, before
    /// training and after each epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub score_gap_curve: Vec<f64>,
    pub final_tau: f64,
    /// Left out of the serialized report so that reruns compare byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_curve.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Gradients of every trainable parameter bound on `tape`.
fn collect_grads(tape: &Tape, bindings: &Bindings) -> Vec<(ParamId, Vec<f64>)> {
    bindings
        .bound_trainable()
        .filter_map(|(id, v)| tape.grad(v).map(|g| (id, g.to_vec())))
        .collect()
}

fn diverged(epoch: usize, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            step,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Splits `order` into consecutive batches, dropping a trailing singleton.
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(|b| b.len() >= 2)
}

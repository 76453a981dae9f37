use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Which directions the contrastive objective covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveLoss {
    /// Mean of text→video and video→text cross-entropy.
    #[default]
    Bidirectional,
    TextToVideo,
}

impl fmt::Display for ContrastiveLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastiveLoss::Bidirectional => "bidirectional",
            ContrastiveLoss::TextToVideo => "t2v",
        })
    }
}

impl FromStr for ContrastiveLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bidirectional" | "bi" => Ok(ContrastiveLoss::Bidirectional),
            "t2v" | "text-to-video" | "t2v-only" => Ok(ContrastiveLoss::TextToVideo),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// In-batch contrastive loss over aligned `B × d` text and video rows.
///
/// Row `i` of each side is a positive pair; every other row in the batch is a
/// negative. Similarities are dot products divided by `tau` (a `1×1` node).
pub fn clip_loss(tape: &mut Tape, text: Var, video: Var, tau: Var, kind: ContrastiveLoss) -> Result<Var> {
    let b = tape.value(text).rows();
    if b < 1 || tape.value(text).shape() != tape.value(video).shape() {
        return Err(Error::Contract(format!(
            "contrastive loss needs aligned non-empty batches, got {:?} and {:?}",
            tape.value(text).shape(),
            tape.value(video).shape()
        )));
    }
    let sims = tape.matmul_nt(text, video)?;
    let logits = tape.div_scalar(sims, tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let t2v = tape.cross_entropy_rows(logits, &targets)?;
    match kind {
        ContrastiveLoss::TextToVideo => Ok(t2v),
        ContrastiveLoss::Bidirectional => {
            let transposed = tape.transpose(logits)?;
            let v2t = tape.cross_entropy_rows(transposed, &targets)?;
            let total = tape.add(t2v, v2t)?;
            tape.scale(total, 0.5)
        }
    }
}

/// Mean hinge `max(0, margin − pos + neg)` over aligned score columns.
pub fn margin_ranking_loss(tape: &mut Tape, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let diff = tape.sub(neg, pos)?;
    let shifted = tape.add_const(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

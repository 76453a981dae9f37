//! Analytic versus central finite-difference gradients of the training losses.

use serde::Serialize;

use super::{stage1, stage2, ContrastiveLoss, TrainConfig};
use crate::autodiff::{Bindings, Tape, Var};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{Datr, STAGE1_PREFIXES, STAGE2_PREFIXES};

/// Central-difference step used for every scalar.
pub const FD_STEP: f64 = 1e-5;

/// Agreement between the tape gradient and finite differences for one tensor.
#[derive(Clone, Debug, Serialize)]
pub struct GradientCheck {
    pub name: String,
    pub scalars: usize,
    pub analytic_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both
    /// norms are below `1e-12`.
    pub rel_error: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check<F>(model: &Datr, prefixes: &[&str], loss: F) -> Result<Vec<GradientCheck>>
where
    F: Fn(&Datr, &mut Tape, &mut Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut p = Bindings::with_trainable(model.params(), prefixes);
    let l = loss(model, &mut tape, &mut p)?;
    tape.backward(l)?;
    let analytic: Vec<_> = p
        .bound_trainable()
        .map(|(id, v)| {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.params().get(id).len()]);
            (id, g)
        })
        .collect();
    drop(p);
    if analytic.is_empty() {
        return Err(Error::Contract("the loss binds no trainable parameter".into()));
    }

    let value = |m: &Datr| -> Result<f64> {
        let mut tape = Tape::new();
        let mut p = Bindings::frozen(m.params());
        let l = loss(m, &mut tape, &mut p)?;
        Ok(tape.value(l).data()[0])
    };
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (id, grad) in analytic {
        let mut numeric = vec![0.0; grad.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.params().get(id).data()[k];
            probe.params_mut().get_mut(id).data_mut()[k] = orig + FD_STEP;
            let up = value(&probe)?;
            probe.params_mut().get_mut(id).data_mut()[k] = orig - FD_STEP;
            let down = value(&probe)?;
            probe.params_mut().get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&grad).max(norm(&numeric));
        out.push(GradientCheck {
            name: model.params().name(id).to_owned(),
            scalars: grad.len(),
            analytic_norm: norm(&grad),
            rel_error: if scale < 1e-12 { 0.0 } else { norm(&diff) / scale },
        });
    }
    Ok(out)
}

/// Checks every encoder tensor and the temperature on the contrastive loss of
/// the triplets at `batch` positions.
pub fn check_stage1_gradients(
    model: &Datr,
    corpus: &Corpus,
    batch: &[usize],
    kind: ContrastiveLoss,
) -> Result<Vec<GradientCheck>> {
    let all = stage1::items(model, corpus);
    let items: Vec<_> = batch
        .iter()
        .map(|&i| all.get(i).ok_or_else(|| Error::Contract(format!("batch position {i} out of range"))))
        .collect::<Result<_>>()?;
    check(model, &STAGE1_PREFIXES, |m, tape, p| stage1::batch_loss(m, tape, p, &items, kind))
}

/// Checks every fusion and re-ranker tensor on the margin loss of the
/// prepared triplets at `batch` positions.
pub fn check_stage2_gradients(
    model: &Datr,
    data: &stage2::Stage2Data,
    batch: &[usize],
    config: &TrainConfig,
) -> Result<Vec<GradientCheck>> {
    check(model, &STAGE2_PREFIXES, |m, tape, p| {
        stage2::batch_loss(m, data, &data.rows, tape, p, batch, config)?
            .ok_or_else(|| Error::Contract("batch has no negatives".into()))
    })
}

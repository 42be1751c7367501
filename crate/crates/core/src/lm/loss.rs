use ndarray::{Array2, ArrayView1, Axis};

use super::{AdapterGrad, LanguageModel, ModelError};
use crate::align::SparseLogits;

/// One distillation example: a token sequence in the student's tokenization
/// and teacher logits for each of its input positions.
#[derive(Debug, Clone, Copy)]
pub struct KdSample<'a> {
    pub ids: &'a [u32],
    pub target: &'a SparseLogits,
}

/// What `loss_and_grad` differentiates. Sequences are full token sequences:
/// inputs are all but the last token, labels all but the first.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Ce(&'a [&'a [u32]]),
    Kd(&'a [KdSample<'a>]),
    /// `lambda · mean CE(ce) + (1 − lambda) · mean KD(kd)`; an empty `kd`
    /// contributes zero.
    Mixed { lambda: f64, ce: &'a [&'a [u32]], kd: &'a [KdSample<'a>] },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ft: f64,
    pub kd: f64,
}

fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn ce_from_logits(logits: &Array2<f64>, labels: &[u32]) -> f64 {
    let total: f64 = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y as usize])
        .sum();
    total / labels.len() as f64
}

/// Restricted-support teacher distribution at one position.
fn teacher_probs(entries: &[(u32, f32)]) -> Vec<(usize, f64)> {
    let m = entries.iter().map(|e| e.1 as f64).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = entries.iter().map(|e| (e.1 as f64 - m).exp()).collect();
    let z: f64 = w.iter().sum();
    entries.iter().zip(w).map(|(e, w)| (e.0 as usize, w / z)).collect()
}

fn check_kd_target(input_len: usize, target: &SparseLogits, vocab: usize) -> Result<(), ModelError> {
    if target.len() != input_len {
        return Err(ModelError::PositionMismatch { input: input_len, target: target.len() });
    }
    for (t, p) in target.positions.iter().enumerate() {
        if p.entries.is_empty() {
            return Err(ModelError::EmptySupport(t));
        }
        if let Some(&(id, _)) = p.entries.iter().find(|e| e.0 as usize >= vocab) {
            return Err(ModelError::InvalidToken { id, vocab });
        }
    }
    Ok(())
}

fn split(ids: &[u32]) -> Result<(&[u32], &[u32]), ModelError> {
    if ids.len() < 2 {
        return Err(ModelError::SequenceTooShort);
    }
    Ok((&ids[..ids.len() - 1], &ids[1..]))
}

/// Mean next-token cross-entropy over positions.
pub fn ce_loss(model: &LanguageModel, input: &[u32], targets: &[u32]) -> Result<f64, ModelError> {
    if input.len() != targets.len() {
        return Err(ModelError::PositionMismatch { input: input.len(), target: targets.len() });
    }
    let vocab = model.vocab_size();
    if let Some(&id) = targets.iter().find(|&&id| id as usize >= vocab) {
        return Err(ModelError::InvalidToken { id, vocab });
    }
    Ok(ce_from_logits(&model.forward(input)?, targets))
}

/// Mean over positions of the cross-entropy from the teacher distribution
/// (softmax over the target's sparse entries) to the student's full softmax.
pub fn kd_loss(model: &LanguageModel, input: &[u32], target: &SparseLogits) -> Result<f64, ModelError> {
    check_kd_target(input.len(), target, model.vocab_size())?;
    let logits = model.forward(input)?;
    Ok(kd_from_logits(&logits, target))
}

fn kd_from_logits(logits: &Array2<f64>, target: &SparseLogits) -> f64 {
    let total: f64 = logits
        .axis_iter(Axis(0))
        .zip(&target.positions)
        .map(|(row, pos)| {
            let lse = log_sum_exp(row);
            teacher_probs(&pos.entries).iter().map(|&(j, q)| -q * (row[j] - lse)).sum::<f64>()
        })
        .sum();
    total / target.len() as f64
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    p
}

/// Adds `weight · d CE / d adapter` into `grad` (when `weight != 0`) and
/// returns the sample's CE.
fn ce_term(
    model: &LanguageModel,
    ids: &[u32],
    weight: f64,
    grad: &mut AdapterGrad,
) -> Result<f64, ModelError> {
    let (input, labels) = split(ids)?;
    let trace = model.trace(input)?;
    let loss = ce_from_logits(&trace.logits, labels);
    if weight != 0.0 {
        let mut d = softmax_rows(&trace.logits);
        for (t, &y) in labels.iter().enumerate() {
            d[[t, y as usize]] -= 1.0;
        }
        d *= weight / labels.len() as f64;
        model.backward(&trace, &d, grad);
    }
    Ok(loss)
}

fn kd_term(
    model: &LanguageModel,
    sample: &KdSample<'_>,
    weight: f64,
    grad: &mut AdapterGrad,
) -> Result<f64, ModelError> {
    let (input, _) = split(sample.ids)?;
    check_kd_target(input.len(), sample.target, model.vocab_size())?;
    let trace = model.trace(input)?;
    let loss = kd_from_logits(&trace.logits, sample.target);
    if weight != 0.0 {
        let mut d = softmax_rows(&trace.logits);
        for (t, pos) in sample.target.positions.iter().enumerate() {
            for (j, q) in teacher_probs(&pos.entries) {
                d[[t, j]] -= q;
            }
        }
        d *= weight / input.len() as f64;
        model.backward(&trace, &d, grad);
    }
    Ok(loss)
}

/// Loss and its exact gradient with respect to the adapter factors.
pub fn loss_and_grad(model: &LanguageModel, objective: Objective<'_>) -> Result<(LossBreakdown, AdapterGrad), ModelError> {
    let mut grad = AdapterGrad::zeros_like(&model.adapter);
    let (lambda, ce, kd) = match objective {
        Objective::Ce(ce) => (1.0, ce, &[][..]),
        Objective::Kd(kd) => (0.0, &[][..], kd),
        Objective::Mixed { lambda, ce, kd } => (lambda, ce, kd),
    };

    let mut ft = 0.0;
    if !ce.is_empty() {
        let w = lambda / ce.len() as f64;
        for ids in ce {
            ft += ce_term(model, ids, w, &mut grad)?;
        }
        ft /= ce.len() as f64;
    }
    let mut kd_mean = 0.0;
    if !kd.is_empty() {
        let w = (1.0 - lambda) / kd.len() as f64;
        for s in kd {
            kd_mean += kd_term(model, s, w, &mut grad)?;
        }
        kd_mean /= kd.len() as f64;
    }
    let total = match objective {
        Objective::Ce(_) => ft,
        Objective::Kd(_) => kd_mean,
        Objective::Mixed { .. } => lambda * ft + (1.0 - lambda) * kd_mean,
    };
    if !total.is_finite() {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok((LossBreakdown { total, ft, kd: kd_mean }, grad))
}

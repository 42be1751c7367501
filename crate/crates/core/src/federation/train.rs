use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::EncodedDataset;
use crate::knowledge::SelectiveKnowledgeSet;
use crate::lm::{loss_and_grad, KdSample, LanguageModel, ModelError, Objective, OptimizerState};

/// Batch means over one training phase. `kd` averages over every batch,
/// counting batches without distillation targets as zero, so
/// `total == lambda * ft + (1 - lambda) * kd` up to rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseStats {
    pub ft: f64,
    pub kd: f64,
    pub total: f64,
    pub steps: usize,
    /// Distillation examples used, summed over batches.
    pub kd_examples: usize,
}

/// Distillation side of a transfer phase.
#[derive(Debug, Clone, Copy)]
pub struct Transfer<'a> {
    pub lambda: f64,
    pub selected: &'a SelectiveKnowledgeSet,
}

/// Runs `epochs` passes of shuffled minibatches over `data`.
///
/// Without `transfer` every batch minimizes plain cross-entropy. With it,
/// each batch minimizes `lambda` times the batch cross-entropy plus
/// `1 - lambda` times the distillation loss over the batch samples that
/// appear in the selective set.
pub fn run_epochs(
    model: &mut LanguageModel,
    optimizer: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    data: &EncodedDataset,
    epochs: usize,
    batch_size: usize,
    transfer: Option<Transfer<'_>>,
) -> Result<PhaseStats, ModelError> {
    let lookup = transfer.map(|t| t.selected.by_sample());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut stats = PhaseStats::default();
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            let ce: Vec<&[u32]> = batch.iter().map(|&i| data.samples[i].ids.as_slice()).collect();
            let (breakdown, grad) = match (transfer, &lookup) {
                (Some(t), Some(lookup)) => {
                    let kd: Vec<KdSample<'_>> = batch
                        .iter()
                        .filter_map(|&i| {
                            let s = &data.samples[i];
                            lookup.get(&s.sample_id).map(|r| KdSample { ids: &s.ids, target: &r.logits })
                        })
                        .collect();
                    stats.kd_examples += kd.len();
                    loss_and_grad(model, Objective::Mixed { lambda: t.lambda, ce: &ce, kd: &kd })?
                }
                _ => loss_and_grad(model, Objective::Ce(&ce))?,
            };
            optimizer.step(&mut model.adapter, &grad)?;
            stats.ft += breakdown.ft;
            stats.kd += breakdown.kd;
            stats.total += breakdown.total;
            stats.steps += 1;
        }
    }
    if stats.steps > 0 {
        let n = stats.steps as f64;
        stats.ft /= n;
        stats.kd /= n;
        stats.total /= n;
    }
    Ok(stats)
}

/// The model's per-token cross-entropy on each sample, in dataset order.
pub fn local_losses(model: &LanguageModel, data: &EncodedDataset) -> Result<Vec<(u64, f64)>, ModelError> {
    data.samples
        .iter()
        .map(|s| {
            let n = s.ids.len();
            Ok((s.sample_id, crate::lm::ce_loss(model, &s.ids[..n - 1], &s.ids[1..])?))
        })
        .collect()
}

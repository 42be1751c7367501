use super::{AlignError, AlignmentPath, PositionLogits, SparseLogits, VocabMappingTable};

/// Offset added to the largest carrier logit of a sample to form the value
/// of a one-hot fallback entry.
pub const ONE_HOT_MARGIN: f32 = 1.0;

/// Re-expresses source-side top-K logits in the target vocabulary.
///
/// `target_labels[t]` is the realized next token at target position `t`.
/// A target position whose token has a carrier in `path` receives the
/// carrier's entries mapped through `table`, keeping the first value written
/// to each target id. Every other position gets a single one-hot entry on its
/// label. The final source token has no logits, so a carrier pointing at it
/// also falls back to one-hot.
pub fn project_logits(
    source: &SparseLogits,
    path: &AlignmentPath,
    table: &VocabMappingTable,
    target_labels: &[u32],
) -> Result<SparseLogits, AlignError> {
    if path.source_len > source.len() + 1 {
        return Err(AlignError::CarrierOutOfRange { carrier: path.source_len - 1, positions: source.len() });
    }
    if target_labels.len() > path.target_len {
        return Err(AlignError::LengthMismatch { path: path.target_len, positions: target_labels.len() });
    }
    let carriers = path.target_carriers();
    let one_hot = source.max_logit().unwrap_or(0.0) + ONE_HOT_MARGIN;

    let mut positions = Vec::with_capacity(target_labels.len());
    for (t, &label) in target_labels.iter().enumerate() {
        let entries = match carriers[t] {
            Some(s) if s < source.len() => {
                let mut out: Vec<(u32, f32)> = Vec::with_capacity(source.positions[s].entries.len());
                for &(src_id, value) in &source.positions[s].entries {
                    let mapped = table
                        .get(src_id)
                        .ok_or(AlignError::InvalidId { side: super::Side::Source, id: src_id })?;
                    if !out.iter().any(|e| e.0 == mapped) {
                        out.push((mapped, value));
                    }
                }
                out
            }
            Some(s) if s > source.len() => {
                return Err(AlignError::CarrierOutOfRange { carrier: s, positions: source.len() })
            }
            _ => vec![(label, one_hot)],
        };
        positions.push(PositionLogits { next_token: label, entries });
    }
    Ok(SparseLogits { positions })
}

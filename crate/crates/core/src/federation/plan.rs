use std::sync::Arc;

use crate::align::{align_sequences, project_logits, AlignError, AlignmentPath, MappingCache, VocabMappingTable};
use crate::data::EncodedDataset;
use crate::knowledge::{KnowledgeError, KnowledgeRecord, KnowledgeSet};
use crate::tokenizers::{TokenizerSpec, VocabId};

/// Token alignment of the public set between two tokenizers. The public set
/// never changes, so paths are computed once and reused every round.
#[derive(Debug, Clone)]
pub struct AlignmentPlan {
    pub source: VocabId,
    pub target: VocabId,
    pub table: Arc<VocabMappingTable>,
    sample_ids: Vec<u64>,
    paths: Vec<AlignmentPath>,
    /// Next-token labels on the target side, one list per sample.
    labels: Vec<Vec<u32>>,
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("sample {0}: {1}")]
    Align(u64, AlignError),
    #[error("public sets differ: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

impl AlignmentPlan {
    pub fn build(
        source_tok: &TokenizerSpec,
        source_public: &EncodedDataset,
        target_tok: &TokenizerSpec,
        target_public: &EncodedDataset,
        cache: &MappingCache,
    ) -> Result<Self, PlanError> {
        if source_public.len() != target_public.len() {
            return Err(PlanError::Mismatch(format!("{} vs {} samples", source_public.len(), target_public.len())));
        }
        let table = cache.get_or_build(source_tok.vocab(), target_tok.vocab());
        let mut paths = Vec::with_capacity(source_public.len());
        let mut labels = Vec::with_capacity(source_public.len());
        for (s, t) in source_public.samples.iter().zip(&target_public.samples) {
            if s.sample_id != t.sample_id {
                return Err(PlanError::Mismatch(format!("sample {} vs {}", s.sample_id, t.sample_id)));
            }
            let path = align_sequences(&s.ids, source_tok.vocab(), &t.ids, target_tok.vocab(), &table)
                .map_err(|e| PlanError::Align(s.sample_id, e))?;
            paths.push(path);
            labels.push(t.ids[1..].to_vec());
        }
        Ok(AlignmentPlan {
            source: source_tok.vocab().id(),
            target: target_tok.vocab().id(),
            table,
            sample_ids: source_public.samples.iter().map(|s| s.sample_id).collect(),
            paths,
            labels,
        })
    }

    pub fn paths(&self) -> &[AlignmentPath] {
        &self.paths
    }

    /// Re-expresses `set` in the target vocabulary; losses pass through unchanged.
    pub fn project(&self, set: &KnowledgeSet) -> Result<KnowledgeSet, PlanError> {
        if set.vocab != self.source {
            return Err(PlanError::Mismatch(format!("set vocabulary {} but plan source {}", set.vocab, self.source)));
        }
        if set.records.len() != self.paths.len() {
            return Err(KnowledgeError::SampleMismatch { index: set.records.len().min(self.paths.len()) }.into());
        }
        let records = set
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.sample_id != self.sample_ids[i] {
                    return Err(PlanError::from(KnowledgeError::SampleMismatch { index: i }));
                }
                let logits = project_logits(&r.logits, &self.paths[i], &self.table, &self.labels[i])
                    .map_err(|e| PlanError::Align(r.sample_id, e))?;
                Ok(KnowledgeRecord { sample_id: r.sample_id, loss: r.loss, logits })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(KnowledgeSet { origin: set.origin, round: set.round, vocab: self.target, k_top: set.k_top, records })
    }
}

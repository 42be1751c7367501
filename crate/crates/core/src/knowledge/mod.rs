//! Knowledge sets (per-public-sample loss plus top-K logits), the
//! dual-minimum cross-entropy selection rule, and the wire format.

mod wire;

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::align::SparseLogits;
use crate::data::EncodedDataset;
use crate::lm::{LanguageModel, ModelError};
use crate::tokenizers::VocabId;

pub use wire::{deserialize_knowledge, serialize_knowledge, HEADER_BYTES, MAGIC, VERSION};

/// Participant id: 0 is the server, 1..=K the clients.
pub type ParticipantId = u32;
pub const SERVER_ID: ParticipantId = 0;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("stream does not start with the knowledge-set magic")]
    BadMagic,
    #[error("unsupported knowledge-set version {0}")]
    UnsupportedVersion(u16),
    #[error("stream truncated at byte {offset} ({needed} more bytes expected)")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} unexpected bytes after the last record")]
    TrailingBytes(usize),
    #[error("invalid knowledge set: {0}")]
    Invalid(String),
    #[error("sample ids differ between inputs at index {index}")]
    SampleMismatch { index: usize },
    #[error("selection needs at least one candidate set")]
    NoCandidates,
    #[error("dataset tokenization {dataset} does not match the model vocabulary {model}")]
    TokenizerMismatch { dataset: VocabId, model: VocabId },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeRecord {
    pub sample_id: u64,
    /// Per-token mean cross-entropy of the producing model on this sample.
    pub loss: f32,
    pub logits: SparseLogits,
}

/// Everything one participant shares about the public dataset in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeSet {
    pub origin: ParticipantId,
    pub round: u32,
    /// Vocabulary the logits are expressed in.
    pub vocab: VocabId,
    pub k_top: u32,
    pub records: Vec<KnowledgeRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PayloadSize {
    pub floats: usize,
    pub bytes: usize,
}

impl KnowledgeSet {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        for (i, r) in self.records.iter().enumerate() {
            if i > 0 && self.records[i - 1].sample_id >= r.sample_id {
                return Err(KnowledgeError::Invalid(format!("sample ids not strictly increasing at record {i}")));
            }
            if !r.loss.is_finite() || r.loss < 0.0 {
                return Err(KnowledgeError::Invalid(format!("record {i} has loss {}", r.loss)));
            }
            if let Some(p) = r.logits.positions.iter().find(|p| p.entries.len() > self.k_top as usize) {
                return Err(KnowledgeError::Invalid(format!(
                    "record {i} has {} entries at a position, above k_top {}",
                    p.entries.len(),
                    self.k_top
                )));
            }
            r.logits
                .validate(usize::MAX)
                .map_err(|m| KnowledgeError::Invalid(format!("record {i}: {m}")))?;
        }
        Ok(())
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|r| r.sample_id)
    }

    /// Logit floats and encoded bytes this set costs on the wire.
    pub fn payload_size(&self) -> PayloadSize {
        PayloadSize {
            floats: self.records.iter().map(|r| r.logits.float_count()).sum(),
            bytes: wire::encoded_len(self),
        }
    }
}

/// Payload of a set whose records have the given position counts and whose
/// positions all carry `entries` logits, without building it.
pub fn payload_for_shape(positions_per_record: impl IntoIterator<Item = usize>, entries: usize) -> PayloadSize {
    let (mut floats, mut bytes) = (0, HEADER_BYTES);
    for n in positions_per_record {
        floats += n * entries;
        bytes += wire::RECORD_BYTES + n * (wire::POSITION_BYTES + entries * wire::ENTRY_BYTES);
    }
    PayloadSize { floats, bytes }
}

/// Runs [`LanguageModel::knowledge_record`] over every public sample.
pub fn build_knowledge_set(
    model: &LanguageModel,
    public: &EncodedDataset,
    k_top: usize,
    origin: ParticipantId,
    round: u32,
) -> Result<KnowledgeSet, KnowledgeError> {
    let model_vocab = model.tokenizer().vocab().id();
    if public.vocab != model_vocab {
        return Err(KnowledgeError::TokenizerMismatch { dataset: public.vocab, model: model_vocab });
    }
    let records = public
        .samples
        .iter()
        .map(|s| {
            let (loss, logits) = model.knowledge_record(&s.ids, k_top)?;
            Ok(KnowledgeRecord { sample_id: s.sample_id, loss: loss as f32, logits })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(KnowledgeSet { origin, round, vocab: model_vocab, k_top: k_top as u32, records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveRecord {
    pub sample_id: u64,
    pub logits: SparseLogits,
    pub source: ParticipantId,
    pub source_loss: f32,
}

/// Distillation targets admitted by [`dual_min_ce`], in sample order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectiveKnowledgeSet {
    pub records: Vec<SelectiveRecord>,
}

impl SelectiveKnowledgeSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn by_sample(&self) -> HashMap<u64, &SelectiveRecord> {
        self.records.iter().map(|r| (r.sample_id, r)).collect()
    }
}

/// For each sample, takes the candidate with the smallest loss (lowest
/// participant id on ties) and admits its logits only when that loss is
/// strictly below the recipient's own loss on the sample.
///
/// `local` lists `(sample_id, loss)` in the same order as every candidate's
/// records. Candidates must already be expressed in the recipient's vocabulary.
pub fn dual_min_ce(local: &[(u64, f64)], candidates: &[&KnowledgeSet]) -> Result<SelectiveKnowledgeSet, KnowledgeError> {
    if candidates.is_empty() {
        return Err(KnowledgeError::NoCandidates);
    }
    for c in candidates {
        if c.records.len() != local.len() {
            return Err(KnowledgeError::SampleMismatch { index: c.records.len().min(local.len()) });
        }
    }
    let mut records = Vec::new();
    for (i, &(sample_id, local_loss)) in local.iter().enumerate() {
        let mut best: Option<(&KnowledgeSet, &KnowledgeRecord)> = None;
        for &c in candidates {
            let r = &c.records[i];
            if r.sample_id != sample_id {
                return Err(KnowledgeError::SampleMismatch { index: i });
            }
            let better = match best {
                None => true,
                Some((bc, br)) => r.loss < br.loss || (r.loss == br.loss && c.origin < bc.origin),
            };
            if better {
                best = Some((c, r));
            }
        }
        let (set, rec) = best.expect("candidates is non-empty");
        if (rec.loss as f64) < local_loss {
            records.push(SelectiveRecord {
                sample_id,
                logits: rec.logits.clone(),
                source: set.origin,
                source_loss: rec.loss,
            });
        }
    }
    Ok(SelectiveKnowledgeSet { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::PositionLogits;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_set(rng: &mut ChaCha8Rng, origin: u32, n: usize, max_positions: usize, k_top: usize) -> KnowledgeSet {
        let mut id = 0u64;
        let records = (0..n)
            .map(|_| {
                id += rng.random_range(1..5);
                let positions = (0..rng.random_range(0..=max_positions))
                    .map(|_| {
                        let k = rng.random_range(0..=k_top);
                        let mut ids: Vec<u32> = Vec::new();
                        while ids.len() < k {
                            let t = rng.random_range(0..64);
                            if !ids.contains(&t) {
                                ids.push(t);
                            }
                        }
                        let mut entries: Vec<(u32, f32)> = ids.into_iter().map(|t| (t, rng.random_range(-8.0f32..8.0))).collect();
                        entries.sort_by(|a, b| b.1.total_cmp(&a.1));
                        PositionLogits { next_token: rng.random_range(0..64), entries }
                    })
                    .collect();
                KnowledgeRecord { sample_id: id, loss: rng.random_range(0.0f32..6.0), logits: SparseLogits { positions } }
            })
            .collect();
        KnowledgeSet { origin, round: rng.random_range(0..10), vocab: VocabId(rng.random()), k_top: k_top as u32, records }
    }

    fn with_losses(origin: u32, losses: &[f32]) -> KnowledgeSet {
        KnowledgeSet {
            origin,
            round: 0,
            vocab: VocabId(1),
            k_top: 1,
            records: losses
                .iter()
                .enumerate()
                .map(|(i, &loss)| KnowledgeRecord {
                    sample_id: i as u64,
                    loss,
                    logits: SparseLogits {
                        positions: vec![PositionLogits { next_token: origin, entries: vec![(origin, 1.0)] }],
                    },
                })
                .collect(),
        }
    }

    /// Scans all (sample, candidate) pairs without the incremental argmin.
    fn exhaustive(local: &[(u64, f64)], cands: &[&KnowledgeSet]) -> Vec<(u64, u32)> {
        let mut out = Vec::new();
        for (i, &(sid, l)) in local.iter().enumerate() {
            let min = cands.iter().map(|c| c.records[i].loss).fold(f32::INFINITY, f32::min);
            let winner = cands.iter().filter(|c| c.records[i].loss == min).map(|c| c.origin).min().unwrap();
            if (min as f64) < l {
                out.push((sid, winner));
            }
        }
        out
    }

    #[test]
    fn nothing_admissible() {
        let local = [(0, 1.0), (1, 0.5)];
        let a = with_losses(1, &[1.0, 0.7]);
        let b = with_losses(2, &[2.0, 0.5]);
        assert!(dual_min_ce(&local, &[&a, &b]).unwrap().is_empty());
    }

    #[test]
    fn single_candidate_uses_direct_condition() {
        let local = [(0, 1.0), (1, 0.5), (2, 3.0)];
        let server = with_losses(0, &[0.9, 0.6, 2.0]);
        let sel = dual_min_ce(&local, &[&server]).unwrap();
        assert_eq!(sel.records.iter().map(|r| r.sample_id).collect::<Vec<_>>(), vec![0, 2]);
        assert!(sel.records.iter().all(|r| r.source == 0));
    }

    #[test]
    fn ties_go_to_lowest_origin_regardless_of_order() {
        let local = [(0, 5.0)];
        let a = with_losses(3, &[1.0]);
        let b = with_losses(2, &[1.0]);
        let x = dual_min_ce(&local, &[&a, &b]).unwrap();
        let y = dual_min_ce(&local, &[&b, &a]).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.records[0].source, 2);
        assert_eq!(x.records[0].logits.positions[0].entries[0].0, 2);
    }

    #[test]
    fn mismatched_samples_are_rejected() {
        let a = with_losses(1, &[1.0, 2.0]);
        assert!(matches!(dual_min_ce(&[(0, 1.0)], &[&a]), Err(KnowledgeError::SampleMismatch { .. })));
        assert!(matches!(dual_min_ce(&[(0, 1.0), (7, 1.0)], &[&a]), Err(KnowledgeError::SampleMismatch { index: 1 })));
        assert!(matches!(dual_min_ce(&[(0, 1.0)], &[]), Err(KnowledgeError::NoCandidates)));
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let k = rng.random_range(1..=3);
            let n = 50;
            // coarse losses so ties happen
            let sets: Vec<KnowledgeSet> = (1..=k)
                .map(|o| with_losses(o, &(0..n).map(|_| rng.random_range(0..8) as f32 / 2.0).collect::<Vec<_>>()))
                .collect();
            let local: Vec<(u64, f64)> = (0..n).map(|i| (i as u64, rng.random_range(0..8) as f64 / 2.0)).collect();
            let refs: Vec<&KnowledgeSet> = sets.iter().collect();
            let sel = dual_min_ce(&local, &refs).unwrap();
            let got: Vec<(u64, u32)> = sel.records.iter().map(|r| (r.sample_id, r.source)).collect();
            assert_eq!(got, exhaustive(&local, &refs));
            for r in &sel.records {
                assert!((r.source_loss as f64) < local[r.sample_id as usize].1);
            }
        }
    }

    #[test]
    fn payload_counts_match_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let set = random_set(&mut rng, 1, 6, 5, 4);
            let manual: usize = set.records.iter().flat_map(|r| &r.logits.positions).map(|p| p.entries.len()).sum();
            let size = set.payload_size();
            assert_eq!(size.floats, manual);
            assert_eq!(size.bytes, serialize_knowledge(&set).len());
        }
        let empty = KnowledgeSet { origin: 0, round: 0, vocab: VocabId(0), k_top: 16, records: vec![] };
        assert_eq!(empty.payload_size(), PayloadSize { floats: 0, bytes: HEADER_BYTES });

        let mut full = random_set(&mut rng, 1, 5, 4, 3);
        for r in &mut full.records {
            for p in &mut r.logits.positions {
                p.entries = vec![(3, 2.0), (1, 1.0), (0, 0.5)];
            }
        }
        let shape = full.records.iter().map(|r| r.logits.len());
        assert_eq!(payload_for_shape(shape, 3), full.payload_size());
    }

    #[test]
    fn wire_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&mut rng, 2, 8, 6, 5);
        let bytes = serialize_knowledge(&set);
        let back = deserialize_knowledge(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(serialize_knowledge(&back), bytes);

        let empty = KnowledgeSet { origin: 0, round: 4, vocab: VocabId(9), k_top: 16, records: vec![] };
        let eb = serialize_knowledge(&empty);
        assert_eq!(eb.len(), HEADER_BYTES);
        assert_eq!(deserialize_knowledge(&eb).unwrap(), empty);

        for cut in [0, 3, 10, HEADER_BYTES, bytes.len() - 1] {
            let err = deserialize_knowledge(&bytes[..cut]).unwrap_err();
            if cut < 4 {
                assert!(matches!(err, KnowledgeError::BadMagic), "{cut}: {err}");
            } else {
                assert!(matches!(err, KnowledgeError::Truncated { .. }), "{cut}: {err}");
            }
        }
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(deserialize_knowledge(&bad), Err(KnowledgeError::UnsupportedVersion(7))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(deserialize_knowledge(&long), Err(KnowledgeError::TrailingBytes(1))));
    }
}

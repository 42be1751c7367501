//! Cross-party byte format of a [`KnowledgeSet`]. Little-endian throughout.
//!
//! ```text
//! header   magic "MKTK" | version u16 | origin u32 | round u32 |
//!          record count u32 | k_top u32 | vocabulary id u64
//! record   sample_id u64 | loss f32 | position count u32 |
//!          per position: next token u32 | entry count u32 |
//!                        entry count × (token id u32, logit f32)
//! ```

use super::{KnowledgeError, KnowledgeRecord, KnowledgeSet};
use crate::align::{PositionLogits, SparseLogits};
use crate::tokenizers::VocabId;

pub const MAGIC: &[u8; 4] = b"MKTK";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 4 + 4 + 8;
pub(super) const RECORD_BYTES: usize = 8 + 4 + 4;
pub(super) const POSITION_BYTES: usize = 4 + 4;
pub(super) const ENTRY_BYTES: usize = 4 + 4;

pub(super) fn encoded_len(set: &KnowledgeSet) -> usize {
    HEADER_BYTES
        + set
            .records
            .iter()
            .map(|r| RECORD_BYTES + r.logits.positions.iter().map(|p| POSITION_BYTES + ENTRY_BYTES * p.entries.len()).sum::<usize>())
            .sum::<usize>()
}

pub fn serialize_knowledge(set: &KnowledgeSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(set));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&set.origin.to_le_bytes());
    out.extend_from_slice(&set.round.to_le_bytes());
    out.extend_from_slice(&(set.records.len() as u32).to_le_bytes());
    out.extend_from_slice(&set.k_top.to_le_bytes());
    out.extend_from_slice(&set.vocab.0.to_le_bytes());
    for r in &set.records {
        out.extend_from_slice(&r.sample_id.to_le_bytes());
        out.extend_from_slice(&r.loss.to_le_bytes());
        out.extend_from_slice(&(r.logits.positions.len() as u32).to_le_bytes());
        for p in &r.logits.positions {
            out.extend_from_slice(&p.next_token.to_le_bytes());
            out.extend_from_slice(&(p.entries.len() as u32).to_le_bytes());
            for &(id, v) in &p.entries {
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Input<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Input<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], KnowledgeError> {
        let end = self.at + N;
        if end > self.bytes.len() {
            return Err(KnowledgeError::Truncated { offset: self.at, needed: N });
        }
        let out = self.bytes[self.at..end].try_into().expect("slice has length N");
        self.at = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, KnowledgeError> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32, KnowledgeError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64, KnowledgeError> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32, KnowledgeError> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    /// Rejects counts that could not possibly fit in the remaining bytes,
    /// so corrupt lengths never trigger huge allocations.
    fn count(&mut self, min_item: usize) -> Result<usize, KnowledgeError> {
        let at = self.at;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.bytes.len() - self.at {
            return Err(KnowledgeError::Truncated { offset: at, needed: n.saturating_mul(min_item) });
        }
        Ok(n)
    }
}

/// Parses a complete stream. Any defect yields an error; a partially
/// decoded set is never returned.
pub fn deserialize_knowledge(bytes: &[u8]) -> Result<KnowledgeSet, KnowledgeError> {
    let mut inp = Input { bytes, at: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(KnowledgeError::BadMagic);
    }
    inp.at = MAGIC.len();
    let version = inp.u16()?;
    if version != VERSION {
        return Err(KnowledgeError::UnsupportedVersion(version));
    }
    let origin = inp.u32()?;
    let round = inp.u32()?;
    let n = inp.u32()? as usize;
    let k_top = inp.u32()?;
    let vocab = VocabId(inp.u64()?);
    if n.saturating_mul(RECORD_BYTES) > bytes.len() - inp.at {
        return Err(KnowledgeError::Truncated { offset: inp.at, needed: n.saturating_mul(RECORD_BYTES) });
    }
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let sample_id = inp.u64()?;
        let loss = inp.f32()?;
        let np = inp.count(POSITION_BYTES)?;
        let mut positions = Vec::with_capacity(np);
        for _ in 0..np {
            let next_token = inp.u32()?;
            let ne = inp.count(ENTRY_BYTES)?;
            let mut entries = Vec::with_capacity(ne);
            for _ in 0..ne {
                entries.push((inp.u32()?, inp.f32()?));
            }
            positions.push(PositionLogits { next_token, entries });
        }
        records.push(KnowledgeRecord { sample_id, loss, logits: SparseLogits { positions } });
    }
    if inp.at != bytes.len() {
        return Err(KnowledgeError::TrailingBytes(bytes.len() - inp.at));
    }
    let set = KnowledgeSet { origin, round, vocab, k_top, records };
    set.validate()?;
    Ok(set)
}

use serde::{Deserialize, Serialize};

/// Top-K logit entries for one position, plus the token actually observed
/// next in the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionLogits {
    pub next_token: u32,
    /// `(token_id, logit)` pairs, unique ids, sorted by descending logit.
    pub entries: Vec<(u32, f32)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseLogits {
    pub positions: Vec<PositionLogits>,
}

impl SparseLogits {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of transmitted logit values.
    pub fn float_count(&self) -> usize {
        self.positions.iter().map(|p| p.entries.len()).sum()
    }

    pub fn max_logit(&self) -> Option<f32> {
        self.positions.iter().flat_map(|p| p.entries.iter().map(|e| e.1)).reduce(f32::max)
    }

    /// Checks the per-position invariants: finite values, unique ids,
    /// descending order and ids below `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<(), String> {
        for (t, pos) in self.positions.iter().enumerate() {
            if pos.next_token as usize >= vocab_size {
                return Err(format!("position {t}: next token {} out of range", pos.next_token));
            }
            for (k, &(id, v)) in pos.entries.iter().enumerate() {
                if id as usize >= vocab_size {
                    return Err(format!("position {t}: token {id} out of range"));
                }
                if !v.is_finite() {
                    return Err(format!("position {t}: non-finite logit"));
                }
                if k > 0 && pos.entries[k - 1].1 < v {
                    return Err(format!("position {t}: entries not sorted by descending logit"));
                }
                if pos.entries[..k].iter().any(|e| e.0 == id) {
                    return Err(format!("position {t}: duplicate token {id}"));
                }
            }
        }
        Ok(())
    }
}

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use super::distance::edit_distance_chars;
use super::AlignError;
use crate::textfmt::{Reader, Writer};
use crate::tokenizers::{VocabId, Vocabulary};

/// For every source token, the closest target token by edit distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabMappingTable {
    pub source: VocabId,
    pub target: VocabId,
    pub map: Vec<u32>,
}

impl VocabMappingTable {
    pub fn get(&self, source_id: u32) -> Option<u32> {
        self.map.get(source_id as usize).copied()
    }

    pub fn to_text(&self) -> String {
        let mut w = Writer::new("mapping", 1);
        w.field("source", self.source);
        w.field("target", self.target);
        w.field("entries", self.map.len());
        for (s, t) in self.map.iter().enumerate() {
            w.line(format_args!("{s} {t}"));
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self, AlignError> {
        let mut r = Reader::open(text, "mapping", 1)?;
        let raw = r_field(&mut r, "source")?;
        let source = parse_vocab_id(&r, raw)?;
        let raw = r_field(&mut r, "target")?;
        let target = parse_vocab_id(&r, raw)?;
        let n: usize = r.field("entries")?;
        let mut map = Vec::with_capacity(n);
        for s in 0..n {
            let line = r.next_line()?;
            let parsed = line
                .split_once(' ')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<u32>().ok()?)));
            match parsed {
                Some((idx, t)) if idx == s => map.push(t),
                _ => return Err(r.err(format!("bad mapping entry '{line}'")).into()),
            }
        }
        r.finish()?;
        Ok(VocabMappingTable { source, target, map })
    }
}

fn r_field<'a>(r: &mut Reader<'a>, key: &str) -> Result<&'a str, AlignError> {
    Ok(r.raw_field(key)?)
}

fn parse_vocab_id(r: &Reader<'_>, raw: &str) -> Result<VocabId, AlignError> {
    u64::from_str_radix(raw, 16)
        .map(VocabId)
        .map_err(|_| r.err(format!("bad vocabulary id '{raw}'")).into())
}

/// Maps each source token to the target token at minimum edit distance,
/// breaking ties by the lexicographically smallest target string.
pub fn build_mapping_table(source: &Vocabulary, target: &Vocabulary) -> VocabMappingTable {
    let targets: Vec<(&str, Vec<char>)> =
        target.tokens().iter().map(|t| (t.as_str(), t.chars().collect())).collect();
    let map = source
        .tokens()
        .par_iter()
        .map(|tok| {
            if let Some(id) = target.lookup(tok) {
                return id;
            }
            let chars: Vec<char> = tok.chars().collect();
            let mut best: Option<(usize, &str, u32)> = None;
            for (id, (t, tc)) in targets.iter().enumerate() {
                let gap = chars.len().abs_diff(tc.len());
                if let Some((bd, _, _)) = best {
                    // Length difference is a lower bound on the distance.
                    if gap > bd {
                        continue;
                    }
                }
                let d = edit_distance_chars(&chars, tc);
                let better = match best {
                    None => true,
                    Some((bd, bt, _)) => d < bd || (d == bd && *t < bt),
                };
                if better {
                    best = Some((d, t, id as u32));
                }
            }
            best.expect("target vocabulary is non-empty").2
        })
        .collect();
    VocabMappingTable { source: source.id(), target: target.id(), map }
}

/// Mapping tables keyed by (source, target) vocabulary ids, built on first use.
#[derive(Debug, Default)]
pub struct MappingCache {
    tables: Mutex<HashMap<(VocabId, VocabId), Arc<VocabMappingTable>>>,
}

impl MappingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, source: &Vocabulary, target: &Vocabulary) -> Arc<VocabMappingTable> {
        let key = (source.id(), target.id());
        if let Some(t) = self.tables.lock().expect("mapping cache poisoned").get(&key) {
            return Arc::clone(t);
        }
        let table = Arc::new(build_mapping_table(source, target));
        let mut tables = self.tables.lock().expect("mapping cache poisoned");
        Arc::clone(tables.entry(key).or_insert(table))
    }

    pub fn len(&self) -> usize {
        self.tables.lock().expect("mapping cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::edit_distance;

    fn lookup<'a>(table: &VocabMappingTable, src: &Vocabulary, tgt: &'a Vocabulary, tok: &str) -> &'a str {
        tgt.token(table.get(src.lookup(tok).unwrap()).unwrap()).unwrap()
    }

    #[test]
    fn util_maps_to_utilize() {
        let src = Vocabulary::with_unk(["util", "ize", "we"]);
        let tgt = Vocabulary::with_unk(["we", "utilize", "dynamic"]);
        let table = build_mapping_table(&src, &tgt);
        assert_eq!(lookup(&table, &src, &tgt, "util"), "utilize");
        assert_eq!(lookup(&table, &src, &tgt, "we"), "we");
    }

    #[test]
    fn identical_vocabularies_give_identity() {
        let v = Vocabulary::with_unk(["a", "ab", "ba", "abc"]);
        let table = build_mapping_table(&v, &v);
        assert_eq!(table.map, (0..v.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn lexicographic_tie_break() {
        let src = Vocabulary::new(vec!["ab".into()], 0).unwrap();
        let tgt = Vocabulary::new(vec!["ba".into(), "aa".into()], 0).unwrap();
        assert_eq!(edit_distance("ab", "aa"), 1);
        assert_eq!(edit_distance("ab", "ba"), 2);
        let tgt2 = Vocabulary::new(vec!["bb".into(), "aa".into()], 0).unwrap();
        // both at distance 1: "aa" < "bb"
        let table = build_mapping_table(&src, &tgt2);
        assert_eq!(tgt2.token(table.map[0]), Some("aa"));
        let table = build_mapping_table(&src, &tgt);
        assert_eq!(tgt.token(table.map[0]), Some("aa"));
    }

    #[test]
    fn text_round_trip() {
        let src = Vocabulary::with_unk(["util", "ize"]);
        let tgt = Vocabulary::with_unk(["utilize"]);
        let table = build_mapping_table(&src, &tgt);
        let text = table.to_text();
        let back = VocabMappingTable::from_text(&text).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.to_text(), text);
        assert!(VocabMappingTable::from_text(&text.replace("2 1", "7 1")).is_err());
    }

    #[test]
    fn cache_reuses_tables() {
        let a = Vocabulary::with_unk(["x", "y"]);
        let b = Vocabulary::with_unk(["xy"]);
        let cache = MappingCache::new();
        let t1 = cache.get_or_build(&a, &b);
        let t2 = cache.get_or_build(&a, &b);
        assert!(Arc::ptr_eq(&t1, &t2));
        cache.get_or_build(&b, &a);
        assert_eq!(cache.len(), 2);
    }
}

use std::ops::Range;

use super::{AlignError, Side, VocabMappingTable};
use crate::textfmt::{Reader, Writer};
use crate::tokenizers::Vocabulary;

/// Longest span allowed on either side of a many-to-one or one-to-many pair.
pub const MAX_SPAN: usize = 4;

const EXACT_SCORE: u32 = 2;
const RELATED_SCORE: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairKind {
    /// One source token and one target token with identical surface strings.
    Exact,
    /// Several source tokens against one target token.
    ManyToOne,
    /// One source token against several target tokens.
    OneToMany,
    /// A single token on one side with nothing on the other.
    Unmatched,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Exact => "exact",
            PairKind::ManyToOne => "many_to_one",
            PairKind::OneToMany => "one_to_many",
            PairKind::Unmatched => "unmatched",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "exact" => PairKind::Exact,
            "many_to_one" => PairKind::ManyToOne,
            "one_to_many" => PairKind::OneToMany,
            "unmatched" => PairKind::Unmatched,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedPair {
    pub source: Range<usize>,
    pub target: Range<usize>,
    pub kind: PairKind,
}

impl AlignedPair {
    /// Source token whose logits stand in for the target token, if any.
    /// Exact pairs carry their single source token; many-to-one pairs
    /// carry the first token of the source span.
    pub fn carrier(&self) -> Option<usize> {
        match self.kind {
            PairKind::Exact | PairKind::ManyToOne => Some(self.source.start),
            PairKind::OneToMany | PairKind::Unmatched => None,
        }
    }
}

/// Monotone alignment covering both token sequences in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub pairs: Vec<AlignedPair>,
    pub source_len: usize,
    pub target_len: usize,
}

impl AlignmentPath {
    pub fn count(&self, kind: PairKind) -> usize {
        self.pairs.iter().filter(|p| p.kind == kind).count()
    }

    /// `(score, exact-pair count)`, the quantity the aligner maximizes.
    pub fn value(&self) -> (u32, u32) {
        let exact = self.count(PairKind::Exact) as u32;
        let related = (self.count(PairKind::ManyToOne) + self.count(PairKind::OneToMany)) as u32;
        (exact * EXACT_SCORE + related * RELATED_SCORE, exact)
    }

    /// For each target index, the carrier source index (see [`AlignedPair::carrier`]).
    pub fn target_carriers(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.target_len];
        for p in &self.pairs {
            if let Some(c) = p.carrier() {
                out[p.target.start] = Some(c);
            }
        }
        out
    }

    /// Checks contiguity, coverage and per-kind span shapes.
    pub fn check(&self) -> Result<(), String> {
        let (mut s, mut t) = (0, 0);
        for (i, p) in self.pairs.iter().enumerate() {
            if p.source.start != s || p.target.start != t {
                return Err(format!("pair {i} is not contiguous with its predecessor"));
            }
            let (ls, lt) = (p.source.len(), p.target.len());
            let ok = match p.kind {
                PairKind::Exact => ls == 1 && lt == 1,
                PairKind::ManyToOne => (2..=MAX_SPAN).contains(&ls) && lt == 1,
                PairKind::OneToMany => ls == 1 && (2..=MAX_SPAN).contains(&lt),
                PairKind::Unmatched => ls + lt == 1,
            };
            if !ok || p.source.end < p.source.start || p.target.end < p.target.start {
                return Err(format!("pair {i} has spans inconsistent with kind {}", p.kind.as_str()));
            }
            s = p.source.end;
            t = p.target.end;
        }
        if s != self.source_len || t != self.target_len {
            return Err("path does not cover both sequences".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut w = Writer::new("alignment", 1);
        w.field("source_len", self.source_len);
        w.field("target_len", self.target_len);
        w.field("pairs", self.pairs.len());
        for p in &self.pairs {
            w.line(format_args!(
                "{} {} {} {} {}",
                p.kind.as_str(),
                p.source.start,
                p.source.end,
                p.target.start,
                p.target.end
            ));
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self, AlignError> {
        let mut r = Reader::open(text, "alignment", 1)?;
        let source_len: usize = r.field("source_len")?;
        let target_len: usize = r.field("target_len")?;
        let n: usize = r.field("pairs")?;
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let line = r.next_line()?;
            let f: Vec<&str> = line.split(' ').collect();
            let parsed = (f.len() == 5)
                .then(|| {
                    let kind = PairKind::parse(f[0])?;
                    let nums: Option<Vec<usize>> = f[1..].iter().map(|x| x.parse().ok()).collect();
                    let nums = nums?;
                    Some(AlignedPair { source: nums[0]..nums[1], target: nums[2]..nums[3], kind })
                })
                .flatten();
            pairs.push(parsed.ok_or_else(|| r.err(format!("bad pair '{line}'")))?);
        }
        r.finish()?;
        let path = AlignmentPath { pairs, source_len, target_len };
        path.check().map_err(AlignError::InvalidPath)?;
        Ok(path)
    }
}

/// Candidate pair shapes in tie-break order: shorter combined span first,
/// and at equal length the move that advances the source side first.
pub(crate) const MOVES: [(usize, usize); 9] =
    [(1, 0), (0, 1), (1, 1), (2, 1), (1, 2), (3, 1), (1, 3), (4, 1), (1, 4)];

/// Scores of possible pairs over two concrete token sequences.
pub(crate) struct PairScorer<'a> {
    src: Vec<&'a str>,
    tgt: Vec<&'a str>,
    src_ids: &'a [u32],
    tgt_ids: &'a [u32],
    table: &'a VocabMappingTable,
}

impl<'a> PairScorer<'a> {
    pub(crate) fn new(
        source: &'a [u32],
        source_vocab: &'a Vocabulary,
        target: &'a [u32],
        target_vocab: &'a Vocabulary,
        table: &'a VocabMappingTable,
    ) -> Result<Self, AlignError> {
        if source.is_empty() {
            return Err(AlignError::EmptySequence(Side::Source));
        }
        if target.is_empty() {
            return Err(AlignError::EmptySequence(Side::Target));
        }
        if table.map.len() != source_vocab.len() {
            return Err(AlignError::TableMismatch);
        }
        let surface = |ids: &[u32], vocab: &'a Vocabulary, side| -> Result<Vec<&'a str>, AlignError> {
            ids.iter()
                .map(|&id| vocab.token(id).ok_or(AlignError::InvalidId { side, id }))
                .collect()
        };
        Ok(PairScorer {
            src: surface(source, source_vocab, Side::Source)?,
            tgt: surface(target, target_vocab, Side::Target)?,
            src_ids: source,
            tgt_ids: target,
            table,
        })
    }

    pub(crate) fn source_len(&self) -> usize {
        self.src.len()
    }

    pub(crate) fn target_len(&self) -> usize {
        self.tgt.len()
    }

    /// Kind and `(score, exact)` of the pair starting at `(i, j)` with the
    /// given shape, or `None` when that shape is not a legal pair there.
    pub(crate) fn score(&self, i: usize, j: usize, (ds, dt): (usize, usize)) -> Option<(PairKind, (u32, u32))> {
        if i + ds > self.src.len() || j + dt > self.tgt.len() {
            return None;
        }
        match (ds, dt) {
            (1, 0) | (0, 1) => Some((PairKind::Unmatched, (0, 0))),
            (1, 1) => (self.src[i] == self.tgt[j]).then_some((PairKind::Exact, (EXACT_SCORE, 1))),
            (m, 1) => {
                let concat: String = self.src[i..i + m].concat();
                let related = concat == self.tgt[j] || self.table.get(self.src_ids[i]) == Some(self.tgt_ids[j]);
                related.then_some((PairKind::ManyToOne, (RELATED_SCORE, 0)))
            }
            (1, n) => {
                let concat: String = self.tgt[j..j + n].concat();
                let related = concat == self.src[i] || self.table.get(self.src_ids[i]) == Some(self.tgt_ids[j]);
                related.then_some((PairKind::OneToMany, (RELATED_SCORE, 0)))
            }
            _ => None,
        }
    }
}

fn add(a: (u32, u32), b: (u32, u32)) -> (u32, u32) {
    (a.0 + b.0, a.1 + b.1)
}

/// Monotone alignment of two tokenizations of the same text.
///
/// Exact surface matches score 2, many-to-one and one-to-many pairs whose
/// concatenated span equals the single token (or whose first source token
/// maps to the first target token through `table`) score 1, unmatched tokens
/// score 0; spans are at most [`MAX_SPAN`] long. The path maximizes
/// `(score, exact count)`; among equal paths, the one whose sequence of pair
/// shapes is smallest in [`MOVES`] order from the start wins.
pub fn align_sequences(
    source: &[u32],
    source_vocab: &Vocabulary,
    target: &[u32],
    target_vocab: &Vocabulary,
    table: &VocabMappingTable,
) -> Result<AlignmentPath, AlignError> {
    let scorer = PairScorer::new(source, source_vocab, target, target_vocab, table)?;
    let (n, m) = (scorer.source_len(), scorer.target_len());
    let width = m + 1;
    // Suffix DP: best[i][j] is the optimum over alignments of src[i..], tgt[j..].
    let mut best = vec![(0u32, 0u32); (n + 1) * width];
    let mut choice: Vec<Option<(usize, PairKind)>> = vec![None; (n + 1) * width];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            if i == n && j == m {
                continue;
            }
            let mut cell: Option<((u32, u32), usize, PairKind)> = None;
            for (k, &mv) in MOVES.iter().enumerate() {
                let Some((kind, v)) = scorer.score(i, j, mv) else { continue };
                let total = add(v, best[(i + mv.0) * width + j + mv.1]);
                if cell.is_none_or(|(b, _, _)| total > b) {
                    cell = Some((total, k, kind));
                }
            }
            let (total, k, kind) = cell.expect("a gap move is always available");
            best[i * width + j] = total;
            choice[i * width + j] = Some((k, kind));
        }
    }

    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let (k, kind) = choice[i * width + j].expect("every non-terminal cell has a choice");
        let (ds, dt) = MOVES[k];
        pairs.push(AlignedPair { source: i..i + ds, target: j..j + dt, kind });
        i += ds;
        j += dt;
    }
    Ok(AlignmentPath { pairs, source_len: n, target_len: m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::build_mapping_table;
    use crate::tokenizers::{demo_subword_tokenizer, demo_word_tokenizer, Vocabulary, DEMO_SENTENCE};

    /// Enumerates every monotone path and picks the best by the documented
    /// rule, independent of the DP.
    fn brute_force(scorer: &PairScorer<'_>) -> AlignmentPath {
        type Step = (usize, PairKind, usize, usize);
        fn go(
            s: &PairScorer<'_>,
            i: usize,
            j: usize,
            acc: &mut Vec<Step>,
            out: &mut Vec<((u32, u32), Vec<Step>)>,
        ) {
            if i == s.source_len() && j == s.target_len() {
                let v = acc.iter().fold((0, 0), |a, &(k, kind, i, j)| add(a, s.score(i, j, MOVES[k]).map(|x| x.1).unwrap_or_else(|| panic!("{kind:?}"))));
                out.push((v, acc.clone()));
                return;
            }
            for (k, &mv) in MOVES.iter().enumerate() {
                if let Some((kind, _)) = s.score(i, j, mv) {
                    acc.push((k, kind, i, j));
                    go(s, i + mv.0, j + mv.1, acc, out);
                    acc.pop();
                }
            }
        }
        let mut all = Vec::new();
        go(scorer, 0, 0, &mut Vec::new(), &mut all);
        let top = all.iter().map(|(v, _)| *v).max().unwrap();
        let winner = all
            .into_iter()
            .filter(|(v, _)| *v == top)
            .map(|(_, p)| p)
            .min_by(|a, b| {
                let ka: Vec<usize> = a.iter().map(|x| x.0).collect();
                let kb: Vec<usize> = b.iter().map(|x| x.0).collect();
                ka.cmp(&kb)
            })
            .unwrap();
        AlignmentPath {
            pairs: winner
                .into_iter()
                .map(|(k, kind, i, j)| AlignedPair { source: i..i + MOVES[k].0, target: j..j + MOVES[k].1, kind })
                .collect(),
            source_len: scorer.source_len(),
            target_len: scorer.target_len(),
        }
    }

    #[test]
    fn demo_sentence_alignment() {
        let src = demo_subword_tokenizer();
        let tgt = demo_word_tokenizer();
        let table = build_mapping_table(src.vocab(), tgt.vocab());
        let s = src.tokenize(DEMO_SENTENCE);
        let t = tgt.tokenize(DEMO_SENTENCE);
        let path = align_sequences(&s, src.vocab(), &t, tgt.vocab(), &table).unwrap();
        path.check().unwrap();
        assert_eq!(path.count(PairKind::Exact), 8);
        assert_eq!(path.count(PairKind::ManyToOne), 1);
        assert_eq!(path.pairs.len(), 9);
        assert_eq!(path.pairs[1], AlignedPair { source: 1..3, target: 1..2, kind: PairKind::ManyToOne });
        assert_eq!(path.pairs[1].carrier(), Some(1));
    }

    #[test]
    fn identical_sequences_align_exactly() {
        let spec = demo_subword_tokenizer();
        let table = build_mapping_table(spec.vocab(), spec.vocab());
        let ids = spec.tokenize(DEMO_SENTENCE);
        let path = align_sequences(&ids, spec.vocab(), &ids, spec.vocab(), &table).unwrap();
        assert_eq!(path.pairs.len(), ids.len());
        for (k, p) in path.pairs.iter().enumerate() {
            assert_eq!((p.kind, p.source.clone(), p.target.clone()), (PairKind::Exact, k..k + 1, k..k + 1));
        }
    }

    #[test]
    fn unrelated_tokens_stay_unmatched() {
        let src = Vocabulary::new(vec!["aa".into()], 0).unwrap();
        let tgt = Vocabulary::new(vec!["<unk>".into(), "bb".into(), "cc".into()], 0).unwrap();
        let table = build_mapping_table(&src, &tgt);
        // "aa" is at distance 2 from both "bb" and "cc" and 5 from "<unk>": maps to "bb".
        assert_eq!(table.map, vec![1]);
        let path = align_sequences(&[0], &src, &[1, 2], &tgt, &table).unwrap();
        // the table links "aa" to the first target token, so the one-to-many pair scores 1
        assert_eq!(path.pairs, vec![AlignedPair { source: 0..1, target: 0..2, kind: PairKind::OneToMany }]);
        let path = align_sequences(&[0], &src, &[2, 1], &tgt, &table).unwrap();
        assert_eq!(path.value(), (0, 0));
        assert!(path.pairs.iter().all(|p| p.kind == PairKind::Unmatched));
    }

    #[test]
    fn empty_input_is_rejected() {
        let v = Vocabulary::with_unk(["a"]);
        let table = build_mapping_table(&v, &v);
        assert!(matches!(align_sequences(&[], &v, &[1], &v, &table), Err(AlignError::EmptySequence(Side::Source))));
        assert!(matches!(align_sequences(&[1], &v, &[], &v, &table), Err(AlignError::EmptySequence(Side::Target))));
        assert!(matches!(align_sequences(&[9], &v, &[1], &v, &table), Err(AlignError::InvalidId { .. })));
    }

    #[test]
    fn dp_matches_exhaustive_enumeration() {
        use rand::{Rng, SeedableRng};
        let src_vocab = Vocabulary::with_unk(["a", "b", "ab", "ba", "c", "abc"]);
        let tgt_vocab = Vocabulary::with_unk(["a", "ab", "b", "bc", "ca", "abc", "cab"]);
        let table = build_mapping_table(&src_vocab, &tgt_vocab);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..400 {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=5);
            let s: Vec<u32> = (0..n).map(|_| rng.random_range(0..src_vocab.len() as u32)).collect();
            let t: Vec<u32> = (0..m).map(|_| rng.random_range(0..tgt_vocab.len() as u32)).collect();
            let dp = align_sequences(&s, &src_vocab, &t, &tgt_vocab, &table).unwrap();
            dp.check().unwrap();
            let scorer = PairScorer::new(&s, &src_vocab, &t, &tgt_vocab, &table).unwrap();
            assert_eq!(dp, brute_force(&scorer), "src {s:?} tgt {t:?}");
        }
    }

    #[test]
    fn text_round_trip() {
        let src = demo_subword_tokenizer();
        let tgt = demo_word_tokenizer();
        let table = build_mapping_table(src.vocab(), tgt.vocab());
        let path = align_sequences(&src.tokenize(DEMO_SENTENCE), src.vocab(), &tgt.tokenize(DEMO_SENTENCE), tgt.vocab(), &table)
            .unwrap();
        let text = path.to_text();
        let back = AlignmentPath::from_text(&text).unwrap();
        assert_eq!(back, path);
        assert_eq!(back.to_text(), text);
        let broken = text.replace("many_to_one 1 3 1 2", "many_to_one 1 2 1 2");
        assert!(AlignmentPath::from_text(&broken).is_err());
    }
}

//! Deterministic toy tokenizers with deliberately different vocabularies.
//!
//! Three kinds are provided: word-level (whitespace split), char-level and a
//! merge-based subword tokenizer that applies ranked pair merges inside each
//! whitespace-delimited word. Together they produce the one-to-one,
//! many-to-one and one-to-many segment correspondences the aligner handles.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::textfmt::{self, FormatError, Reader, Writer};

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("vocabulary contains an empty token at id {0}")]
    EmptyToken(usize),
    #[error("token '{0}' appears more than once in the vocabulary")]
    DuplicateToken(String),
    #[error("unk id {unk} out of range for vocabulary of size {size}")]
    BadUnk { unk: u32, size: usize },
    #[error("merge rule ({0}, {1}) references a token missing from the vocabulary")]
    BadMerge(String, String),
    #[error("merge rules are only valid for the merge-based kind")]
    UnexpectedMerges,
    #[error("token id {id} is out of range for vocabulary of size {size}")]
    InvalidId { id: u32, size: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Stable identifier of a vocabulary, derived from its token list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VocabId(pub u64);

impl fmt::Display for VocabId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Dense id ↔ token-string map with a reserved unknown token.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
    unk_id: u32,
    id: VocabId,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.unk_id == other.unk_id
    }
}

impl Vocabulary {
    pub fn new(entries: Vec<String>, unk_id: u32) -> Result<Self, TokenizerError> {
        if entries.is_empty() {
            return Err(TokenizerError::EmptyVocabulary);
        }
        if unk_id as usize >= entries.len() {
            return Err(TokenizerError::BadUnk { unk: unk_id, size: entries.len() });
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, tok) in entries.iter().enumerate() {
            if tok.is_empty() {
                return Err(TokenizerError::EmptyToken(i));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateToken(tok.clone()));
            }
        }
        let mut hasher = Sha256::new();
        for tok in &entries {
            hasher.update((tok.len() as u64).to_le_bytes());
            hasher.update(tok.as_bytes());
        }
        hasher.update(unk_id.to_le_bytes());
        let digest = hasher.finalize();
        let id = VocabId(u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes")));
        Ok(Vocabulary { entries, index, unk_id, id })
    }

    /// Builds a vocabulary with [`UNK_TOKEN`] at id 0 followed by `tokens`
    /// in first-occurrence order (duplicates dropped).
    pub fn with_unk<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut entries = vec![UNK_TOKEN.to_string()];
        let mut seen: HashMap<String, ()> = HashMap::new();
        seen.insert(UNK_TOKEN.to_string(), ());
        for t in tokens {
            let t = t.into();
            if !t.is_empty() && seen.insert(t.clone(), ()).is_none() {
                entries.push(t);
            }
        }
        Vocabulary::new(entries, 0).expect("deduplicated non-empty tokens form a valid vocabulary")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn id(&self) -> VocabId {
        self.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.entries
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn lookup_or_unk(&self, token: &str) -> u32 {
        self.lookup(token).unwrap_or(self.unk_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Word,
    Char,
    Merge,
}

impl TokenizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerKind::Word => "word",
            TokenizerKind::Char => "char",
            TokenizerKind::Merge => "merge",
        }
    }
}

impl std::str::FromStr for TokenizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "word" => Ok(TokenizerKind::Word),
            "char" => Ok(TokenizerKind::Char),
            "merge" => Ok(TokenizerKind::Merge),
            other => Err(format!("unknown tokenizer kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerSpec {
    kind: TokenizerKind,
    vocab: Vocabulary,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    lowercase: bool,
}

impl TokenizerSpec {
    pub fn new(
        kind: TokenizerKind,
        vocab: Vocabulary,
        merges: Vec<(String, String)>,
        lowercase: bool,
    ) -> Result<Self, TokenizerError> {
        if kind != TokenizerKind::Merge && !merges.is_empty() {
            return Err(TokenizerError::UnexpectedMerges);
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let joined = format!("{a}{b}");
            if vocab.lookup(a).is_none() || vocab.lookup(b).is_none() || vocab.lookup(&joined).is_none() {
                return Err(TokenizerError::BadMerge(a.clone(), b.clone()));
            }
            ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }
        Ok(TokenizerSpec { kind, vocab, merges, ranks, lowercase })
    }

    /// Word-level tokenizer over every whitespace-separated word of `texts`.
    pub fn word_level<'a>(texts: impl IntoIterator<Item = &'a str>, lowercase: bool) -> Self {
        let words = texts.into_iter().flat_map(|t| {
            t.split_whitespace().map(move |w| if lowercase { w.to_lowercase() } else { w.to_string() })
        });
        let vocab = Vocabulary::with_unk(words);
        TokenizerSpec::new(TokenizerKind::Word, vocab, Vec::new(), lowercase).expect("no merges")
    }

    /// Char-level tokenizer over every non-whitespace character of `texts`,
    /// in sorted order.
    pub fn char_level<'a>(texts: impl IntoIterator<Item = &'a str>, lowercase: bool) -> Self {
        let mut chars: Vec<String> = texts
            .into_iter()
            .flat_map(|t| t.chars())
            .filter(|c| !c.is_whitespace())
            .map(|c| if lowercase { c.to_lowercase().collect() } else { c.to_string() })
            .collect();
        chars.sort();
        chars.dedup();
        let vocab = Vocabulary::with_unk(chars);
        TokenizerSpec::new(TokenizerKind::Char, vocab, Vec::new(), lowercase).expect("no merges")
    }

    /// Learns up to `num_merges` pair merges from word frequencies in `texts`.
    /// The most frequent adjacent pair wins each step; ties go to the
    /// lexicographically smallest pair.
    pub fn train_merges<'a>(texts: impl IntoIterator<Item = &'a str>, num_merges: usize, lowercase: bool) -> Self {
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                let w = if lowercase { w.to_lowercase() } else { w.to_string() };
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> =
            word_counts.into_iter().map(|(w, c)| (w.chars().map(String::from).collect(), c)).collect();

        let mut alphabet: Vec<String> = words.iter().flat_map(|(p, _)| p.iter().cloned()).collect();
        alphabet.sort();
        alphabet.dedup();

        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (pieces, count) in &words {
                for w in pieces.windows(2) {
                    *pair_counts.entry((&w[0], &w[1])).or_default() += count;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first maximum is the tie winner.
            let Some((best, _)) = pair_counts
                .into_iter()
                .fold(None::<((&str, &str), usize)>, |acc, (p, c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((p, c)),
                })
            else {
                break;
            };
            let best = (best.0.to_string(), best.1.to_string());
            for (pieces, _) in &mut words {
                *pieces = merge_pair(std::mem::take(pieces), &best.0, &best.1);
            }
            merges.push(best);
        }

        let mut tokens = alphabet;
        tokens.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        let vocab = Vocabulary::with_unk(tokens);
        TokenizerSpec::new(TokenizerKind::Merge, vocab, merges, lowercase).expect("trained merges are closed")
    }

    /// Merge-based tokenizer whose rules build each listed piece left to
    /// right (`u+t`, `ut+i`, `uti+l`, ...), in the order given. Rule order
    /// matters: callers are responsible for listing pieces so that earlier
    /// rules do not fire across piece boundaries of later words.
    pub fn from_pieces(pieces: &[&str], lowercase: bool) -> Self {
        let mut chars: Vec<String> = pieces.iter().flat_map(|p| p.chars()).map(String::from).collect();
        chars.sort();
        chars.dedup();
        let mut merges: Vec<(String, String)> = Vec::new();
        let mut made: Vec<String> = Vec::new();
        for piece in pieces {
            let cs: Vec<char> = piece.chars().collect();
            for end in 2..=cs.len() {
                let left: String = cs[..end - 1].iter().collect();
                let right = cs[end - 1].to_string();
                let joined = format!("{left}{right}");
                if !made.contains(&joined) {
                    merges.push((left, right));
                    made.push(joined);
                }
            }
        }
        let mut tokens = chars;
        tokens.extend(made);
        let vocab = Vocabulary::with_unk(tokens);
        TokenizerSpec::new(TokenizerKind::Merge, vocab, merges, lowercase).expect("chained merges are closed")
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    /// Text as the tokenizer sees it: lowercased when requested, then either
    /// single-space-joined words (word kind) or whitespace removed (other
    /// kinds, whose surface forms concatenate directly).
    pub fn normalize(&self, text: &str) -> String {
        let text = if self.lowercase { text.to_lowercase() } else { text.to_string() };
        match self.kind {
            TokenizerKind::Word => text.split_whitespace().collect::<Vec<_>>().join(" "),
            TokenizerKind::Char | TokenizerKind::Merge => text.split_whitespace().collect(),
        }
    }

    /// Surface segmentation of `text` before vocabulary lookup.
    pub fn segment(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase { text.to_lowercase() } else { text.to_string() };
        match self.kind {
            TokenizerKind::Word => text.split_whitespace().map(String::from).collect(),
            TokenizerKind::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
            TokenizerKind::Merge => text.split_whitespace().flat_map(|w| self.apply_merges(w)).collect(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.segment(text).iter().map(|piece| self.vocab.lookup_or_unk(piece)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let sep = match self.kind {
            TokenizerKind::Word => " ",
            TokenizerKind::Char | TokenizerKind::Merge => "",
        };
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self
                .vocab
                .token(id)
                .ok_or(TokenizerError::InvalidId { id, size: self.vocab.len() })?;
            if i > 0 {
                out.push_str(sep);
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    fn apply_merges(&self, word: &str) -> Vec<String> {
        let mut pieces: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = pieces
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            match best {
                Some((a, b)) => pieces = merge_pair(pieces, &a, &b),
                None => return pieces,
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut w = Writer::new("tokenizer", 1);
        w.field("kind", self.kind.as_str());
        w.field("lowercase", self.lowercase);
        w.field("unk", self.vocab.unk_id);
        w.field("vocab", self.vocab.len());
        for tok in self.vocab.tokens() {
            w.line(format_args!("{}", textfmt::escape(tok)));
        }
        w.field("merges", self.merges.len());
        for (a, b) in &self.merges {
            w.line(format_args!("{} {}", textfmt::escape(a), textfmt::escape(b)));
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut r = Reader::open(text, "tokenizer", 1)?;
        let kind_raw = r.raw_field("kind")?;
        let kind: TokenizerKind = kind_raw.parse().map_err(|m: String| r.err(m))?;
        let lowercase: bool = r.field("lowercase")?;
        let unk: u32 = r.field("unk")?;
        let n: usize = r.field("vocab")?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let line = r.next_line()?;
            entries.push(r.token(line)?);
        }
        let m: usize = r.field("merges")?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let line = r.next_line()?;
            let (a, b) = line.split_once(' ').ok_or_else(|| r.err("merge rule needs two tokens"))?;
            merges.push((r.token(a)?, r.token(b)?));
        }
        r.finish()?;
        TokenizerSpec::new(kind, Vocabulary::new(entries, unk)?, merges, lowercase)
    }
}

fn merge_pair(pieces: Vec<String>, a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(pieces.len());
    let mut i = 0;
    while i < pieces.len() {
        if i + 1 < pieces.len() && pieces[i] == a && pieces[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(pieces[i].clone());
            i += 1;
        }
    }
    out
}

/// Sentence used by the alignment walkthrough and its fixtures.
pub const DEMO_SENTENCE: &str = "we utilize the dynamic programming approach to align tokens";

/// Word-level tokenizer over the words of [`DEMO_SENTENCE`].
pub fn demo_word_tokenizer() -> TokenizerSpec {
    TokenizerSpec::word_level([DEMO_SENTENCE], true)
}

/// Subword tokenizer that splits "utilize" into "util" + "ize" and keeps
/// every other word of [`DEMO_SENTENCE`] whole.
pub fn demo_subword_tokenizer() -> TokenizerSpec {
    TokenizerSpec::from_pieces(
        &["approach", "programming", "dynamic", "tokens", "align", "the", "we", "to", "util", "ize"],
        true,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pieces(spec: &TokenizerSpec, text: &str) -> Vec<String> {
        spec.tokenize(text).iter().map(|&id| spec.vocab().token(id).unwrap().to_string()).collect()
    }

    #[test]
    fn demo_word_segmentation() {
        let spec = demo_word_tokenizer();
        assert_eq!(
            pieces(&spec, DEMO_SENTENCE),
            ["we", "utilize", "the", "dynamic", "programming", "approach", "to", "align", "tokens"]
        );
    }

    #[test]
    fn demo_subword_segmentation() {
        let spec = demo_subword_tokenizer();
        assert_eq!(
            pieces(&spec, DEMO_SENTENCE),
            ["we", "util", "ize", "the", "dynamic", "programming", "approach", "to", "align", "tokens"]
        );
        assert!(spec.vocab().lookup("utilize").is_none());
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let spec = demo_word_tokenizer();
        assert_eq!(spec.tokenize("zzz"), vec![spec.vocab().unk_id()]);
    }

    #[test]
    fn detokenize_rules() {
        let sub = demo_subword_tokenizer();
        assert_eq!(sub.detokenize(&[]).unwrap(), "");
        let ids = [sub.vocab().lookup("util").unwrap(), sub.vocab().lookup("ize").unwrap()];
        assert_eq!(sub.detokenize(&ids).unwrap(), "utilize");
        let word = demo_word_tokenizer();
        let s = "to align the tokens";
        assert_eq!(word.detokenize(&word.tokenize(s)).unwrap(), s);
        assert!(matches!(word.detokenize(&[999]), Err(TokenizerError::InvalidId { id: 999, .. })));
    }

    #[test]
    fn char_level_drops_whitespace() {
        let spec = TokenizerSpec::char_level(["ab ba"], false);
        assert_eq!(spec.vocab().tokens(), ["<unk>", "a", "b"]);
        assert_eq!(spec.detokenize(&spec.tokenize("ab  b")).unwrap(), "abb");
        assert_eq!(spec.tokenize("c"), vec![0]);
    }

    #[test]
    fn trained_merges_are_ordered_by_frequency() {
        let spec = TokenizerSpec::train_merges(["abab abab cd", "ab"], 2, false);
        assert_eq!(spec.merges()[0], ("a".to_string(), "b".to_string()));
        assert_eq!(spec.merges()[1], ("ab".to_string(), "ab".to_string()));
        assert_eq!(pieces(&spec, "abab ab cab"), ["abab", "ab", "c", "ab"]);
    }

    #[test]
    fn rejects_bad_vocab_and_merges() {
        assert!(matches!(Vocabulary::new(vec![], 0), Err(TokenizerError::EmptyVocabulary)));
        assert!(matches!(
            Vocabulary::new(vec!["a".into(), "a".into()], 0),
            Err(TokenizerError::DuplicateToken(_))
        ));
        assert!(matches!(Vocabulary::new(vec!["a".into()], 3), Err(TokenizerError::BadUnk { .. })));
        let vocab = Vocabulary::with_unk(["a", "b"]);
        assert!(matches!(
            TokenizerSpec::new(TokenizerKind::Merge, vocab.clone(), vec![("a".into(), "b".into())], false),
            Err(TokenizerError::BadMerge(..))
        ));
        assert!(matches!(
            TokenizerSpec::new(TokenizerKind::Word, vocab, vec![("a".into(), "b".into())], false),
            Err(TokenizerError::UnexpectedMerges)
        ));
    }

    #[test]
    fn text_format_round_trip_is_exact() {
        for spec in [demo_word_tokenizer(), demo_subword_tokenizer(), TokenizerSpec::char_level(["x y\\z"], false)] {
            let text = spec.to_text();
            let back = TokenizerSpec::from_text(&text).unwrap();
            assert_eq!(back, spec);
            assert_eq!(back.to_text(), text);
            assert_eq!(back.vocab().id(), spec.vocab().id());
        }
    }

    #[test]
    fn text_format_rejects_garbage() {
        let text = demo_word_tokenizer().to_text().replace("kind word", "kind bytes");
        assert!(TokenizerSpec::from_text(&text).is_err());
        let truncated: String = demo_word_tokenizer().to_text().lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(TokenizerSpec::from_text(&truncated).is_err());
    }
}

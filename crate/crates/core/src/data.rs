//! Synthetic topic-skewed corpora, the public/private split, and evaluation.
//!
//! Every topic is a first-order Markov chain over one shared set of
//! pseudo-words. The chains differ, so the right continuation of a word
//! depends on which topic the prefix came from.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{LanguageModel, ModelError};
use crate::tokenizers::{TokenizerSpec, VocabId};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("pool of {pool} samples cannot be split into {parts} non-empty equal parts")]
    PoolTooSmall { pool: usize, parts: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("sample {0} encodes to fewer than two tokens")]
    TooShort(u64),
    #[error("dataset line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub seed: u64,
    pub topics: usize,
    pub words: usize,
    /// Probability that a word is followed by its topic's preferred successor.
    pub fidelity: f64,
    /// Weight of a client's home topic in its private mixture.
    pub skew: f64,
    /// All clients draw from the uniform mixture.
    pub homogeneous: bool,
    pub min_words: usize,
    pub max_words: usize,
    pub prompt_words: usize,
    /// Total training pool, split into `clients + 1` equal parts.
    pub pool: usize,
    pub eval_per_topic: usize,
    pub eval_global: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            seed: 7,
            topics: 4,
            words: 24,
            fidelity: 0.9,
            skew: 0.7,
            homogeneous: false,
            min_words: 6,
            max_words: 10,
            prompt_words: 3,
            pool: 1000,
            eval_per_topic: 50,
            eval_global: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub id: u64,
    pub prompt: String,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<TextSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(|s| s.id)
    }

    pub fn texts(&self) -> impl Iterator<Item = String> + '_ {
        self.samples.iter().map(|s| format!("{} {}", s.prompt, s.target))
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut samples: Vec<TextSample> = parts.into_iter().flat_map(|d| d.samples.iter().cloned()).collect();
        samples.sort_by_key(|s| s.id);
        Dataset { samples }
    }

    /// Writes `id<TAB>prompt<TAB>target` lines.
    pub fn write_tsv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut out = csv::WriterBuilder::new().delimiter(b'\t').has_headers(false).from_writer(w);
        for s in &self.samples {
            out.write_record([s.id.to_string().as_str(), &s.prompt, &s.target]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_tsv<R: Read>(r: R) -> Result<Dataset, DataError> {
        let mut rd = csv::ReaderBuilder::new().delimiter(b'\t').has_headers(false).flexible(true).from_reader(r);
        let mut samples = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |msg: &str| DataError::Format { line: i + 1, msg: msg.to_string() };
            if rec.len() != 3 {
                return Err(bad("expected three tab-separated fields"));
            }
            let id = rec[0].parse().map_err(|_| bad("sample id is not an integer"))?;
            if rec[2].trim().is_empty() {
                return Err(bad("empty target"));
            }
            samples.push(TextSample { id, prompt: rec[1].to_string(), target: rec[2].to_string() });
        }
        Ok(Dataset { samples })
    }
}

fn csv_err(e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    DataError::Format { line, msg: e.to_string() }
}

/// Public set, one private set per client, and held-out evaluation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub task: SyntheticTask,
    pub lexicon: Vec<String>,
    pub public: Dataset,
    pub private: Vec<Dataset>,
    /// Drawn from the uniform topic mixture.
    pub eval_global: Dataset,
    pub eval_topics: Vec<Dataset>,
}

impl World {
    pub fn clients(&self) -> usize {
        self.private.len()
    }

    /// Writes `public.tsv`, `client_<k>.tsv` (k from 1) and `eval.tsv`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        self.public.write_tsv(std::fs::File::create(dir.join("public.tsv"))?)?;
        for (k, d) in self.private.iter().enumerate() {
            d.write_tsv(std::fs::File::create(dir.join(format!("client_{}.tsv", k + 1)))?)?;
        }
        self.eval_global.write_tsv(std::fs::File::create(dir.join("eval.tsv"))?)?;
        Ok(())
    }

    /// Reads the layout written by [`World::save_dir`]. Per-topic eval sets
    /// and the lexicon are not stored and come back empty.
    pub fn load_dir(dir: &Path, clients: usize, task: &SyntheticTask) -> Result<World, DataError> {
        let read = |name: &str| -> Result<Dataset, DataError> {
            let path = dir.join(name);
            let file = std::fs::File::open(&path)
                .map_err(|e| DataError::Format { line: 0, msg: format!("{}: {e}", path.display()) })?;
            Dataset::read_tsv(std::io::BufReader::new(file))
        };
        let public = read("public.tsv")?;
        let private = (1..=clients).map(|k| read(&format!("client_{k}.tsv"))).collect::<Result<Vec<_>, _>>()?;
        let eval_global = read("eval.tsv")?;
        let mut seen = std::collections::HashSet::new();
        for d in std::iter::once(&public).chain(&private).chain(std::iter::once(&eval_global)) {
            if let Some(id) = d.ids().find(|&id| !seen.insert(id)) {
                return Err(DataError::Format { line: 0, msg: format!("sample id {id} appears in more than one place") });
            }
        }
        if public.samples.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(DataError::Format { line: 0, msg: "public sample ids must be increasing".into() });
        }
        Ok(World { task: task.clone(), lexicon: vec![], public, private, eval_global, eval_topics: vec![] })
    }

    /// Texts tokenizers may be built from; everything here is public.
    pub fn public_texts(&self) -> Vec<String> {
        self.public.texts().collect()
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// `n` distinct two-syllable pseudo-words, in a seed-dependent order.
pub fn pseudo_words(n: usize, rng: &mut impl Rng) -> Vec<String> {
    let syllables: Vec<String> = ONSETS.iter().flat_map(|o| VOWELS.iter().map(move |v| format!("{o}{v}"))).collect();
    let mut all: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().filter(move |b| *b != a).map(move |b| format!("{a}{b}")))
        .collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

struct Chain {
    start: Vec<usize>,
    next: Vec<usize>,
}

struct Generator<'a> {
    task: &'a SyntheticTask,
    lexicon: &'a [String],
    chains: Vec<Chain>,
}

impl Generator<'_> {
    fn sample(&self, topic: usize, id: u64, rng: &mut ChaCha8Rng) -> TextSample {
        let t = self.task;
        let chain = &self.chains[topic];
        let len = rng.random_range(t.min_words..=t.max_words);
        let mut w = chain.start[rng.random_range(0..chain.start.len())];
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            words.push(self.lexicon[w].as_str());
            w = if rng.random_bool(t.fidelity) { chain.next[w] } else { rng.random_range(0..t.words) };
        }
        TextSample { id, prompt: words[..t.prompt_words].join(" "), target: words[t.prompt_words..].join(" ") }
    }

    fn draw(&self, n: usize, mix: &WeightedIndex<f64>, next_id: &mut u64, rng: &mut ChaCha8Rng) -> Dataset {
        let samples = (0..n)
            .map(|_| {
                let topic = mix.sample(rng);
                let s = self.sample(topic, *next_id, rng);
                *next_id += 1;
                s
            })
            .collect();
        Dataset { samples }
    }
}

/// Topic weights of client `k` (0-based).
pub fn client_mixture(task: &SyntheticTask, k: usize) -> Vec<f64> {
    let n = task.topics;
    if task.homogeneous || n == 1 {
        return vec![1.0 / n as f64; n];
    }
    let rest = (1.0 - task.skew) / (n - 1) as f64;
    (0..n).map(|j| if j == k % n { task.skew } else { rest }).collect()
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidTask(m.to_string()));
        if self.topics == 0 {
            return bad("topics must be at least 1");
        }
        if self.words < 2 || self.words > ONSETS.len() * VOWELS.len() * (ONSETS.len() * VOWELS.len() - 1) {
            return bad("words out of range");
        }
        if !(0.0..=1.0).contains(&self.fidelity) || !(0.0..=1.0).contains(&self.skew) {
            return bad("fidelity and skew must lie in [0, 1]");
        }
        if self.prompt_words == 0 || self.min_words <= self.prompt_words || self.max_words < self.min_words {
            return bad("need 0 < prompt_words < min_words <= max_words");
        }
        Ok(())
    }
}

/// Generates the world for `clients` participants. The pool is cut into
/// `clients + 1` equal parts: one public part drawn from the uniform topic
/// mixture and one private part per client drawn from its skewed mixture.
/// Sample ids are unique across every split.
pub fn generate_world(task: &SyntheticTask, clients: usize) -> Result<World, DataError> {
    task.validate()?;
    let parts = clients + 1;
    let share = task.pool / parts;
    if clients == 0 || share == 0 {
        return Err(DataError::PoolTooSmall { pool: task.pool, parts });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let lexicon = pseudo_words(task.words, &mut rng);
    let chains = (0..task.topics)
        .map(|_| {
            let mut start: Vec<usize> = (0..task.words).collect();
            start.shuffle(&mut rng);
            start.truncate(3.min(task.words));
            let next = (0..task.words).map(|_| rng.random_range(0..task.words)).collect();
            Chain { start, next }
        })
        .collect();
    let gen = Generator { task, lexicon: &lexicon, chains };
    let uniform = WeightedIndex::new(vec![1.0; task.topics]).expect("non-empty uniform weights");
    let mut next_id = 0u64;
    let public = gen.draw(share, &uniform, &mut next_id, &mut rng);
    let private = (0..clients)
        .map(|k| {
            let mix = WeightedIndex::new(client_mixture(task, k)).map_err(|e| DataError::InvalidTask(e.to_string()))?;
            Ok(gen.draw(share, &mix, &mut next_id, &mut rng))
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let eval_global = gen.draw(task.eval_global, &uniform, &mut next_id, &mut rng);
    let eval_topics = (0..task.topics)
        .map(|j| {
            let mut w = vec![0.0; task.topics];
            w[j] = 1.0;
            let one = WeightedIndex::new(w).expect("one positive weight");
            gen.draw(task.eval_per_topic, &one, &mut next_id, &mut rng)
        })
        .collect();
    Ok(World { task: task.clone(), lexicon, public, private, eval_global, eval_topics })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub sample_id: u64,
    pub ids: Vec<u32>,
    /// Tokens belonging to the prompt; the rest is the target.
    pub prompt_len: usize,
}

/// A dataset tokenized for one model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDataset {
    pub vocab: VocabId,
    pub samples: Vec<EncodedSample>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Prompt and target are tokenized separately and concatenated, then cut to
/// `window + 1` tokens.
pub fn encode_dataset(tokenizer: &TokenizerSpec, window: usize, data: &Dataset) -> Result<EncodedDataset, DataError> {
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let mut ids = tokenizer.tokenize(&s.prompt);
            let prompt_len = ids.len();
            ids.extend(tokenizer.tokenize(&s.target));
            ids.truncate(window + 1);
            if ids.len() < 2 {
                return Err(DataError::TooShort(s.id));
            }
            let prompt_len = prompt_len.min(ids.len());
            Ok(EncodedSample { sample_id: s.id, ids, prompt_len })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncodedDataset { vocab: tokenizer.vocab().id(), samples })
}

pub fn encode_for(model: &LanguageModel, data: &Dataset) -> Result<EncodedDataset, DataError> {
    encode_dataset(model.tokenizer(), model.context_window(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub perplexity: f64,
    /// Number of scored positions.
    pub positions: usize,
}

/// Scores next-token predictions at target positions, pooled over the set.
pub fn evaluate(model: &LanguageModel, data: &EncodedDataset) -> Result<EvalMetrics, DataError> {
    let (mut hits, mut nll, mut n) = (0usize, 0.0f64, 0usize);
    for s in &data.samples {
        let first = s.prompt_len.max(1);
        if first >= s.ids.len() {
            continue;
        }
        let logits = model.forward(&s.ids[..s.ids.len() - 1])?;
        for label_pos in first..s.ids.len() {
            let row = logits.row(label_pos - 1);
            let label = s.ids[label_pos] as usize;
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == label);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[label];
            n += 1;
        }
    }
    if n == 0 {
        return Err(DataError::EmptyEvalSet);
    }
    Ok(EvalMetrics { accuracy: hits as f64 / n as f64, perplexity: (nll / n as f64).exp(), positions: n })
}

/// Total-variation distance between the word frequency distributions of two sets.
pub fn word_tv_distance(a: &Dataset, b: &Dataset) -> f64 {
    use std::collections::BTreeMap;
    let hist = |d: &Dataset| {
        let mut h: BTreeMap<String, f64> = BTreeMap::new();
        let mut total = 0.0f64;
        for t in d.texts() {
            for w in t.split_whitespace() {
                *h.entry(w.to_string()).or_default() += 1.0;
                total += 1.0;
            }
        }
        h.values_mut().for_each(|v| *v /= total.max(1.0));
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    let keys: std::collections::BTreeSet<&String> = ha.keys().chain(hb.keys()).collect();
    0.5 * keys.iter().map(|k| (ha.get(*k).unwrap_or(&0.0) - hb.get(*k).unwrap_or(&0.0)).abs()).sum::<f64>()
}

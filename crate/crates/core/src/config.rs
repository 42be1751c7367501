//! Run configuration: protocol hyperparameters, per-participant model and
//! tokenizer specs, and the synthetic task. Loaded from TOML; any field can
//! be overridden with a dotted `key=value` pair.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SyntheticTask;
use crate::lm::ModelConfig;
use crate::tokenizers::{TokenizerKind, TokenizerSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fedmkt,
    ZeroShot,
    Standalone,
    Centralized,
    Fedavg,
    Llm2slm,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Fedmkt, Mode::ZeroShot, Mode::Standalone, Mode::Centralized, Mode::Fedavg, Mode::Llm2slm];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fedmkt => "fedmkt",
            Mode::ZeroShot => "zero_shot",
            Mode::Standalone => "standalone",
            Mode::Centralized => "centralized",
            Mode::Fedavg => "fedavg",
            Mode::Llm2slm => "llm2slm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid("mode", format!("unknown mode `{s}`")))
    }
}

/// How to build a participant's tokenizer from the public texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    /// Merge rules to learn (merge kind only).
    #[serde(default)]
    pub merges: usize,
    #[serde(default)]
    pub lowercase: bool,
}

impl TokenizerConfig {
    pub fn build<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> TokenizerSpec {
        match self.kind {
            TokenizerKind::Word => TokenizerSpec::word_level(texts, self.lowercase),
            TokenizerKind::Char => TokenizerSpec::char_level(texts, self.lowercase),
            TokenizerKind::Merge => TokenizerSpec::train_merges(texts, self.merges, self.lowercase),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantConfig {
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
}

impl ParticipantConfig {
    pub fn new(hidden: usize, rank: usize, kind: TokenizerKind, merges: usize) -> Self {
        let mut model = ModelConfig::with_hidden(hidden);
        model.rank = rank;
        ParticipantConfig { model, tokenizer: TokenizerConfig { kind, merges, lowercase: false } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub mode: Mode,
    /// Seed for model initialization and batch order.
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub server_epochs: usize,
    pub client_epochs: usize,
    pub lambda: f64,
    pub server_lr: f64,
    pub client_lr: f64,
    pub k_top: usize,
    pub batch_size: usize,
    /// Worker threads for client phases; 1 runs everything on the caller's thread.
    pub workers: usize,
    pub server: ParticipantConfig,
    /// One entry per client, or fewer entries reused cyclically.
    pub client_models: Vec<ParticipantConfig>,
    pub task: SyntheticTask,
    /// Directory holding `public.tsv`, `client_<k>.tsv` and `eval.tsv`;
    /// when unset the task generator builds the data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            mode: Mode::Fedmkt,
            seed: 1,
            clients: 4,
            rounds: 10,
            server_epochs: 1,
            client_epochs: 1,
            lambda: 0.9,
            server_lr: 0.01,
            client_lr: 0.01,
            k_top: 16,
            batch_size: 4,
            workers: 1,
            server: ParticipantConfig::new(48, 8, TokenizerKind::Word, 0),
            client_models: vec![
                ParticipantConfig::new(16, 8, TokenizerKind::Char, 0),
                ParticipantConfig::new(16, 8, TokenizerKind::Merge, 20),
                ParticipantConfig::new(16, 8, TokenizerKind::Merge, 60),
                ParticipantConfig::new(16, 8, TokenizerKind::Word, 0),
            ],
            task: SyntheticTask::default(),
            data_dir: None,
        }
    }
}

impl FedConfig {
    /// Four identical client models (same width, rank and tokenizer) on
    /// the default skewed data, for FedAvg comparisons.
    pub fn homogeneous() -> Self {
        FedConfig { client_models: vec![ParticipantConfig::new(32, 8, TokenizerKind::Merge, 40)], ..FedConfig::default() }
    }

    pub fn client_config(&self, k: usize) -> &ParticipantConfig {
        &self.client_models[k % self.client_models.len()]
    }

    pub fn clients_identical(&self) -> bool {
        (1..self.clients).all(|k| self.client_config(k) == self.client_config(0))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.clients == 0 {
            return Err(invalid("clients", "must be at least 1"));
        }
        for (name, v) in [("rounds", self.rounds), ("server_epochs", self.server_epochs), ("client_epochs", self.client_epochs)] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("lambda", "must lie in [0, 1]"));
        }
        for (name, lr) in [("server_lr", self.server_lr), ("client_lr", self.client_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(invalid(name, "must be positive"));
            }
        }
        if self.k_top == 0 {
            return Err(invalid("k_top", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        if self.client_models.is_empty() {
            return Err(invalid("client_models", "needs at least one entry"));
        }
        let parts = std::iter::once(("server", &self.server)).chain(self.client_models.iter().map(|c| ("client_models", c)));
        for (name, p) in parts {
            let m = &p.model;
            if m.hidden == 0 || m.rank == 0 || m.rank > m.hidden {
                return Err(invalid(name, "need 0 < rank <= hidden"));
            }
            if m.context_window < 2 {
                return Err(invalid(name, "context_window must be at least 2"));
            }
        }
        if self.mode == Mode::Fedavg && !self.clients_identical() {
            return Err(invalid("client_models", "fedavg needs identical client architectures and tokenizers"));
        }
        self.task.validate().map_err(|e| invalid("task", e.to_string()))?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides on top of the TOML text `base`. Keys are
    /// dotted paths (`task.seed=3`); values are TOML literals, with bare words
    /// taken as strings.
    pub fn from_toml_with_overrides(base: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        // materialize defaults so nested keys such as server.model.hidden exist
        let full: FedConfig = toml::Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let defaults: toml::Table = toml::from_str(&full.to_toml()).expect("round trip");
        merge(&mut table, defaults);
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            let value = parse_value(raw.trim());
            set_path(&mut table, key.trim(), value).map_err(|m| invalid(key.trim(), m))?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }
}

fn merge(into: &mut toml::Table, defaults: toml::Table) {
    for (k, v) in defaults {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (Some(_), _) => {}
            (None, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or("empty key")?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(format!("`{p}` is not a table; edit it in the config file")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = FedConfig::default();
        c.validate().unwrap();
        assert_eq!(FedConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.lambda, 0.9);
        assert_eq!(c.batch_size, 4);
    }

    #[test]
    fn overrides_beat_file_values() {
        let c = FedConfig::from_toml_with_overrides(
            "rounds = 3\nmode = \"standalone\"\n",
            &["rounds=5".into(), "task.seed=11".into(), "server.model.hidden=12".into(), "mode=fedavg".into()],
        )
        .unwrap();
        assert_eq!(c.rounds, 5);
        assert_eq!(c.task.seed, 11);
        assert_eq!(c.server.model.hidden, 12);
        assert_eq!(c.mode, Mode::Fedavg);
        assert_eq!(c.lambda, 0.9);
    }

    #[test]
    fn validation_names_the_field() {
        let c = FedConfig { k_top: 0, ..FedConfig::default() };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.starts_with("k_top"), "{e}");
        let c = FedConfig { lambda: 1.5, ..FedConfig::default() };
        assert!(c.validate().is_err());
        let c = FedConfig { mode: Mode::Fedavg, ..FedConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("fedavg"));
        let mut h = FedConfig::homogeneous();
        h.mode = Mode::Fedavg;
        h.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_bad_overrides_fail() {
        assert!(FedConfig::from_toml("roundz = 3").is_err());
        assert!(matches!(FedConfig::from_toml_with_overrides("", &["rounds".into()]), Err(ConfigError::BadOverride(_))));
        assert!(FedConfig::from_toml_with_overrides("", &["rounds=abc".into()]).is_err());
    }
}

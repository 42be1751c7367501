//! Federated two-way distillation between one server model and several
//! client models that use different tokenizers.
//!
//! - [`tokenizers`]: word, char and merge tokenizers with a text format.
//! - [`align`]: vocabulary mapping, sequence alignment, logit projection.
//! - [`lm`]: the tiny frozen-base model, its low-rank adapter, losses, AdamW.
//! - [`knowledge`]: knowledge sets, selection, and their byte format.
//! - [`data`]: synthetic non-IID worlds, TSV datasets, evaluation.
//! - [`federation`]: the round protocol, baselines, logs and summaries.
//! - [`config`]: TOML configuration with dotted overrides.

pub mod align;
pub mod config;
pub mod data;
pub mod federation;
pub mod knowledge;
pub mod lm;
pub mod textfmt;
pub mod tokenizers;

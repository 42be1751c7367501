//! `mkt`: run federated transfer experiments, compare their summaries,
//! inspect token alignment, and estimate traffic.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime abort.

mod align_demo;
mod compare;
mod cost;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mkt_core::config::{FedConfig, Mode};

#[derive(Parser)]
#[command(name = "mkt", version, about = "Two-way logit exchange between a server language model and client models with their own tokenizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training mode and write logs, summary, manifest and checkpoints.
    Run(run::RunArgs),
    /// Tabulate per-participant metrics from several run summaries.
    Compare(compare::CompareArgs),
    /// Show how two tokenizers align on one sentence.
    AlignDemo(align_demo::AlignDemoArgs),
    /// Report communication volume and trainable-parameter fractions.
    Cost(cost::CostArgs),
}

/// Config file plus overrides. Precedence: named flag, then `--set`, then
/// the file, then built-in defaults.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any field, e.g. `--set task.seed=3` or `--set server.model.hidden=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k_top: Option<usize>,
    /// Worker threads for client phases (1 is the deterministic reference).
    #[arg(long)]
    workers: Option<usize>,
    /// Directory with public.tsv, client_<k>.tsv and eval.tsv.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<FedConfig, Failure> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Failure::Invalid(anyhow::anyhow!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut overrides = self.set.clone();
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push(format!("{k}={v}"));
            }
        };
        flag("mode", self.mode.map(|m| format!("\"{m}\"")));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("clients", self.clients.map(|v| v.to_string()));
        flag("rounds", self.rounds.map(|v| v.to_string()));
        flag("lambda", self.lambda.map(|v| format!("{v:?}")));
        flag("k_top", self.k_top.map(|v| v.to_string()));
        flag("workers", self.workers.map(|v| v.to_string()));
        flag("data_dir", self.data_dir.as_ref().map(|p| format!("{:?}", p.display().to_string())));
        let config = FedConfig::from_toml_with_overrides(&text, &overrides).map_err(|e| Failure::Invalid(e.into()))?;
        config.validate().map_err(|e| Failure::Invalid(e.into()))?;
        Ok(config)
    }
}

pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Failure::Runtime(e.into())
    }

    pub fn invalid(e: impl Into<anyhow::Error>) -> Self {
        Failure::Invalid(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run::run(a),
        Command::Compare(a) => compare::compare(a),
        Command::AlignDemo(a) => align_demo::align_demo(a),
        Command::Cost(a) => cost::cost(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("aborted: {e:#}");
            ExitCode::from(2)
        }
    }
}

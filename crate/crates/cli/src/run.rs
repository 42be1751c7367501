use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::Args;
use mkt_core::config::FedConfig;
use mkt_core::federation::{build_world, run_mode, NoObserver, RoundRecord, SUMMARY_SCHEMA};
use mkt_core::lm::write_checkpoint;
use serde::Serialize;

use crate::{ConfigArgs, Failure};

#[derive(Args)]
pub struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for this run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Manifest {
    artifact_version: String,
    schema: u32,
    status: String,
    mode: String,
    seed: u64,
    world_seed: u64,
    config: FedConfig,
    started_unix: u64,
    finished_unix: Option<u64>,
    outputs: Vec<String>,
    error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn run(args: RunArgs) -> Result<(), Failure> {
    let config = args.config.load()?;
    let out = &args.out;
    fs::create_dir_all(out.join("checkpoints"))
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::Runtime)?;
    let mut manifest = Manifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        schema: SUMMARY_SCHEMA,
        status: "running".into(),
        mode: config.mode.to_string(),
        seed: config.seed,
        world_seed: config.task.seed,
        config: config.clone(),
        started_unix: now(),
        finished_unix: None,
        outputs: vec![],
        error: None,
    };
    let manifest_path = out.join("manifest.json");
    fs::write(out.join("config.toml"), config.to_toml()).context("writing config snapshot").map_err(Failure::Runtime)?;
    write_json(&manifest_path, &manifest).map_err(Failure::Runtime)?;

    let result = execute(&config, out);
    manifest.finished_unix = Some(now());
    match result {
        Ok(outputs) => {
            manifest.status = "completed".into();
            manifest.outputs = outputs;
            write_json(&manifest_path, &manifest).map_err(Failure::Runtime)?;
            Ok(())
        }
        Err(e) => {
            manifest.status = "aborted".into();
            manifest.error = Some(format!("{e:#}"));
            let _ = write_json(&manifest_path, &manifest);
            Err(Failure::Runtime(e))
        }
    }
}

fn execute(config: &FedConfig, out: &Path) -> anyhow::Result<Vec<String>> {
    let world = build_world(config)?;
    let outcome = run_mode(config, &world, &NoObserver)?;
    let mut outputs = vec!["config.toml".to_string()];

    let csv = fs::File::create(out.join("rounds.csv"))?;
    RoundRecord::write_csv(&outcome.rounds, BufWriter::new(csv))?;
    outputs.push("rounds.csv".into());

    let summary = outcome.summary();
    write_json(&out.join("summary.json"), &summary)?;
    outputs.push("summary.json".into());

    for p in outcome.federation.participants() {
        let name = if p.id == 0 { "server.bin".to_string() } else { format!("client_{}.bin", p.id) };
        let file = fs::File::create(out.join("checkpoints").join(&name))?;
        write_checkpoint(&p.model, BufWriter::new(file))?;
        outputs.push(format!("checkpoints/{name}"));
    }

    println!("mode {} seed {} rounds {} ({} log rows)", config.mode, config.seed, config.rounds, outcome.rounds.len());
    for p in &summary.participants {
        println!("  {:>6} {:<2} acc {:.4} ppl {:.3}", p.role, p.id, p.accuracy, p.perplexity);
    }
    let c = summary.communication;
    println!("  traffic: {} floats up, {} floats down", c.upload_floats, c.download_floats);
    Ok(outputs)
}

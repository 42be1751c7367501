use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use mkt_core::federation::RunSummary;
use serde::Serialize;

use crate::Failure;

#[derive(Args)]
pub struct CompareArgs {
    /// summary.json files, one per mode.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Row {
    participant: u32,
    role: String,
    mode: String,
    accuracy: f64,
    perplexity: f64,
    /// Accuracy minus the first summary's accuracy for the same participant.
    delta: f64,
}

/// Pairs (better, worse) the protocol is expected to respect.
const ORDER: [(&str, &str); 4] =
    [("fedmkt", "standalone"), ("standalone", "zero_shot"), ("fedmkt", "zero_shot"), ("fedmkt", "fedavg")];

pub fn compare(args: CompareArgs) -> Result<(), Failure> {
    let summaries = args
        .summaries
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RunSummary>(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(Failure::Invalid)?;
    let seed = summaries[0].world_seed;
    if let Some(s) = summaries.iter().find(|s| s.world_seed != seed) {
        return Err(Failure::invalid(anyhow!("world seeds differ ({} vs {}); runs are not comparable", seed, s.world_seed)));
    }

    let mut rows = Vec::new();
    let mut by_participant: BTreeMap<u32, BTreeMap<String, f64>> = BTreeMap::new();
    for s in &summaries {
        for p in &s.participants {
            let first = summaries[0].participants.iter().find(|q| q.id == p.id).map_or(f64::NAN, |q| q.accuracy);
            rows.push(Row {
                participant: p.id,
                role: p.role.clone(),
                mode: s.mode.clone(),
                accuracy: p.accuracy,
                perplexity: p.perplexity,
                delta: p.accuracy - first,
            });
            by_participant.entry(p.id).or_default().insert(s.mode.clone(), p.accuracy);
        }
    }
    rows.sort_by_key(|r| r.participant);

    println!("{:>11} {:>6} {:>12} {:>9} {:>10} {:>8}", "participant", "role", "mode", "accuracy", "perplexity", "delta");
    for r in &rows {
        println!(
            "{:>11} {:>6} {:>12} {:>9.4} {:>10.3} {:>+8.4}",
            r.participant, r.role, r.mode, r.accuracy, r.perplexity, r.delta
        );
    }
    let mut violations = 0;
    for (id, modes) in &by_participant {
        for (hi, lo) in ORDER {
            if let (Some(a), Some(b)) = (modes.get(hi), modes.get(lo)) {
                if a < b {
                    violations += 1;
                    println!("ordering violation: participant {id}: {hi} {a:.4} < {lo} {b:.4}");
                }
            }
        }
    }
    if violations == 0 {
        println!("no ordering violations");
    }

    if let Some(path) = &args.csv {
        let write = || -> anyhow::Result<()> {
            let mut w = csv::Writer::from_path(path)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        };
        write().with_context(|| format!("writing {}", path.display())).map_err(Failure::Runtime)?;
    }
    Ok(())
}

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use mkt_core::align::{align_sequences, build_mapping_table, edit_distance, project_logits, PositionLogits, SparseLogits};
use mkt_core::tokenizers::{demo_subword_tokenizer, demo_word_tokenizer, TokenizerSpec, DEMO_SENTENCE};

use crate::Failure;

#[derive(Args)]
pub struct AlignDemoArgs {
    /// Source tokenizer spec file (text format); defaults to the built-in subword demo.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target tokenizer spec file; defaults to the built-in word-level demo.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, default_value = DEMO_SENTENCE)]
    text: String,
}

fn load(path: &Option<PathBuf>, fallback: fn() -> TokenizerSpec) -> anyhow::Result<TokenizerSpec> {
    match path {
        None => Ok(fallback()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TokenizerSpec::from_text(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

pub fn align_demo(args: AlignDemoArgs) -> Result<(), Failure> {
    let src = load(&args.source, demo_subword_tokenizer).map_err(Failure::Invalid)?;
    let tgt = load(&args.target, demo_word_tokenizer).map_err(Failure::Invalid)?;
    if args.text.trim().is_empty() {
        return Err(Failure::invalid(anyhow::anyhow!("text is empty")));
    }
    let (sv, tv) = (src.vocab(), tgt.vocab());
    let s_ids = src.tokenize(&args.text);
    let t_ids = tgt.tokenize(&args.text);
    let s_tok = |id: u32| sv.token(id).unwrap_or("?").to_string();
    let t_tok = |id: u32| tv.token(id).unwrap_or("?").to_string();

    println!("text: {}", args.text);
    println!("source ({}, {} tokens in vocab): {}", src.kind().as_str(), sv.len(), join(&s_ids, &s_tok));
    println!("target ({}, {} tokens in vocab): {}", tgt.kind().as_str(), tv.len(), join(&t_ids, &t_tok));

    let table = build_mapping_table(sv, tv);
    println!("\nmapping table hits:");
    let mut seen = Vec::new();
    for &id in &s_ids {
        if seen.contains(&id) {
            continue;
        }
        seen.push(id);
        let to = table.get(id).expect("table covers the source vocabulary");
        let (a, b) = (s_tok(id), t_tok(to));
        let how = if a == b { "exact".to_string() } else { format!("edit distance {}", edit_distance(&a, &b)) };
        println!("  {a:<14} -> {b:<14} {how}");
    }

    let path = align_sequences(&s_ids, sv, &t_ids, tv, &table).map_err(Failure::invalid)?;
    let (score, exact) = path.value();
    println!("\nalignment ({} pairs, score {score}, {exact} exact):", path.pairs.len());
    for p in &path.pairs {
        let left = join(&s_ids[p.source.clone()], &s_tok);
        let right = join(&t_ids[p.target.clone()], &t_tok);
        let carrier = p.carrier().map(|c| format!("  carrier {}", s_tok(s_ids[c]))).unwrap_or_default();
        println!("  {left:<24} -> {right:<24} {}{carrier}", p.kind.as_str());
    }

    // stand-in teacher: all mass on each realized next source token
    let source = SparseLogits {
        positions: s_ids.windows(2).map(|w| PositionLogits { next_token: w[1], entries: vec![(w[1], 1.0)] }).collect(),
    };
    let labels = if t_ids.len() > 1 { &t_ids[1..] } else { &[][..] };
    let projected = project_logits(&source, &path, &table, labels).map_err(Failure::invalid)?;
    let carriers = path.target_carriers();
    println!("\nprojection (stand-in teacher puts its mass on each next source token):");
    let mut one_hot = 0;
    for (t, pos) in projected.positions.iter().enumerate() {
        let entries: Vec<String> = pos.entries.iter().map(|(id, v)| format!("{}:{v}", t_tok(*id))).collect();
        let origin = match carriers[t] {
            Some(c) if c < source.len() => format!("carried from {}", s_tok(s_ids[c])),
            _ => {
                one_hot += 1;
                "one-hot fallback".to_string()
            }
        };
        println!("  {:>2} {:<14} {:<22} [{}]", t, t_tok(t_ids[t]), origin, entries.join(" "));
    }
    println!("{} positions, {} carried, {} one-hot", projected.len(), projected.len() - one_hot, one_hot);
    Ok(())
}

fn join(ids: &[u32], f: &dyn Fn(u32) -> String) -> String {
    ids.iter().map(|&i| f(i)).collect::<Vec<_>>().join(" ")
}

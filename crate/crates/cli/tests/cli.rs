use std::path::Path;
use std::process::{Command, Output};

use mkt_core::tokenizers::{demo_subword_tokenizer, TokenizerSpec};

fn mkt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkt")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_ok(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", out.to_str().unwrap(), "--set", "task.pool=150", "--set", "task.eval_global=40"];
    args.extend_from_slice(extra);
    let o = mkt(&args);
    assert!(o.status.success(), "run failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn csv_rows(dir: &Path) -> usize {
    let text = std::fs::read_to_string(dir.join("rounds.csv")).unwrap();
    text.lines().count() - 1
}

#[test]
fn zero_shot_logs_no_rounds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("zs");
    run_ok(&dir, &["--mode", "zero_shot"]);
    assert_eq!(csv_rows(&dir), 0);
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"completed\""));
    assert!(dir.join("checkpoints/server.bin").exists());
    assert!(dir.join("checkpoints/client_4.bin").exists());
}

#[test]
fn fedmkt_rows_per_round_and_participant() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("f");
    run_ok(&dir, &["--rounds", "2", "--clients", "2"]);
    assert_eq!(csv_rows(&dir), 6);
}

#[test]
fn identical_invocations_write_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&a, &["--rounds", "1"]);
    run_ok(&b, &["--rounds", "1"]);
    for f in ["rounds.csv", "summary.json", "checkpoints/server.bin", "checkpoints/client_2.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn invalid_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mkt(&["run", "--out", tmp.path().join("x").to_str().unwrap(), "--k-top", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k_top"));
    let o = mkt(&["run", "--out", tmp.path().join("y").to_str().unwrap(), "--set", "no_such_field=3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mkt(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_is_read_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "rounds = 3\nclients = 2\n[task]\npool = 150\neval_global = 40\n").unwrap();
    let dir = tmp.path().join("r");
    let o = mkt(&["run", "--config", cfg.to_str().unwrap(), "--rounds", "1", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&dir), 3);
    let snapshot = std::fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(snapshot.contains("rounds = 1"));
}

#[test]
fn compare_tables_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut summaries = vec![];
    for mode in ["zero_shot", "standalone", "fedmkt"] {
        let dir = tmp.path().join(mode);
        run_ok(&dir, &["--mode", mode, "--rounds", "2"]);
        summaries.push(dir.join("summary.json").to_str().unwrap().to_string());
    }
    let table = tmp.path().join("t.csv");
    let mut args = vec!["compare", "--csv", table.to_str().unwrap()];
    args.extend(summaries.iter().map(String::as_str));
    let o = mkt(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    for mode in ["zero_shot", "standalone", "fedmkt"] {
        assert!(text.contains(mode));
    }
    let rows = std::fs::read_to_string(&table).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 5);

    // one summary on its own, and a summary against itself
    let o = mkt(&["compare", &summaries[2]]);
    assert!(o.status.success());
    let o = mkt(&["compare", "--csv", table.to_str().unwrap(), &summaries[2], &summaries[2]]);
    assert!(o.status.success());
    let mut r = csv::Reader::from_path(&table).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[5].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn compare_rejects_different_worlds() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&a, &["--mode", "zero_shot"]);
    run_ok(&b, &["--mode", "zero_shot", "--set", "task.seed=99"]);
    let o = mkt(&["compare", a.join("summary.json").to_str().unwrap(), b.join("summary.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn align_demo_default_pair() {
    let o = mkt(&["align-demo"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("many_to_one  carrier util"), "{text}");
    assert!(text.contains("8 positions, 8 carried, 0 one-hot"));
}

#[test]
fn align_demo_identical_tokenizers_are_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("s.tok");
    std::fs::write(&spec, demo_subword_tokenizer().to_text()).unwrap();
    let p = spec.to_str().unwrap();
    let o = mkt(&["align-demo", "--source", p, "--target", p]);
    assert!(o.status.success());
    let text = stdout(&o);
    let path_lines: Vec<&str> =
        text.lines().skip_while(|l| !l.starts_with("alignment")).skip(1).take_while(|l| !l.is_empty()).collect();
    assert_eq!(path_lines.len(), 10);
    assert!(path_lines.iter().all(|l| l.contains(" exact ")));
    assert!(text.contains(", 0 one-hot"));
}

#[test]
fn align_demo_without_overlap_falls_back_to_one_hot() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, tgt) = (tmp.path().join("s.tok"), tmp.path().join("t.tok"));
    std::fs::write(&src, TokenizerSpec::char_level(["ab"], true).to_text()).unwrap();
    std::fs::write(&tgt, TokenizerSpec::word_level(["cd"], true).to_text()).unwrap();
    let o = mkt(&["align-demo", "--source", src.to_str().unwrap(), "--target", tgt.to_str().unwrap(), "--text", "ab ab"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("1 positions, 0 carried, 1 one-hot"), "{text}");
}

#[test]
fn align_demo_rejects_bad_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.tok");
    std::fs::write(&bad, "not a tokenizer").unwrap();
    let o = mkt(&["align-demo", "--source", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cost_reports_reference_volume() {
    let o = mkt(&["cost", "--public-samples", "1000", "--seq-len", "512"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("(N*S*K_top): 8192000"));
    let o = mkt(&["cost", "--set", "task.pool=150"]);
    assert!(o.status.success());
    let text = stdout(&o);
    // server adapter: A is 8 x 48 and B is 48 x 8
    let server = text.lines().find(|l| l.contains(" server ")).unwrap();
    let fields: Vec<&str> = server.split_whitespace().collect();
    assert_eq!(fields[5], (2 * 8 * 48).to_string());
    let o = mkt(&["cost", "--k-top", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

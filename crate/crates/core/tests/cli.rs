use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use molcpt::config::RunConfig;
use serde_json::Value;

fn molcpt(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molcpt"))
        .arg("--out-root")
        .arg(root)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("error record on stderr");
    serde_json::from_str::<Value>(line).unwrap()["error"].clone()
}

#[test]
fn stats_match_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    let g = dir.path().join("g.jsonl");
    // "abcd": BOS + 4 + EOS. QA: BOS + "<|user|>\n" (9) + "hi" + "\n<|assistant|>\n" (15) + "ok" + EOS.
    fs::write(&d, "{\"text\":\"abcd\"}\n\n{\"prompt\":\"hi\",\"response\":\"ok\"}\n").unwrap();
    fs::write(&g, "{\"text\":\"0123456789\"}\n").unwrap();
    let o = molcpt(
        dir.path(),
        &["stats", "--domain", d.to_str().unwrap(), "--general", g.to_str().unwrap(), "--context", "16"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout_json(&o);
    assert_eq!(s["context"], 16);
    assert_eq!(s["domain_tokens"], 36);
    assert_eq!(s["general_tokens"], 12);
    assert_eq!(s["domain_to_general_token_ratio"], 3.0);
    let ds = &s["sources"]["d"];
    assert_eq!(ds["documents"], 2);
    assert_eq!(ds["effective_tokens"], 5 + 29);
    // [6], then the 30-token document split as 16 + 15 (one repeated token).
    assert_eq!(ds["sequences"], 3);
    assert_eq!(ds["packed_tokens"], 37);
    let gs = &s["sources"]["g"];
    assert_eq!((gs["sequences"].as_u64(), gs["packed_tokens"].as_u64()), (Some(1), Some(12)));
    assert_eq!(gs["packing_efficiency"], 0.75);
}

#[test]
fn stats_without_prompt_targets() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d.jsonl");
    fs::write(&d, "{\"prompt\":\"hi\",\"response\":\"ok\"}\n").unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "count_prompt_tokens = false\ncontext = 64\n").unwrap();
    let o = molcpt(dir.path(), &["stats", "--config", cfg.to_str().unwrap(), "--domain", d.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout_json(&o)["sources"]["d"]["effective_tokens"], 3);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = molcpt(dir.path(), &["gradcheck", "--instances", "30", "--seed", "3"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("max relative error"));
}

#[test]
fn failures_report_kind_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let o = molcpt(root, &["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_error(&o);
    assert_eq!(e["kind"], "missing_path");
    assert_eq!(e["path"], "/nonexistent/run.toml");

    let o = molcpt(root, &["gradcheck", "--instances", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["kind"], "invalid_argument");

    let bad = root.join("bad.toml");
    fs::write(&bad, "alpha = 2.0\n").unwrap();
    let o = molcpt(root, &["train", "--config", bad.to_str().unwrap(), "--dry-run"]);
    assert_eq!(o.status.code(), Some(1));

    let unknown = root.join("unknown.toml");
    fs::write(&unknown, "alhpa = 0.1\n").unwrap();
    let o = molcpt(root, &["train", "--config", unknown.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let run = root.join("empty_run");
    fs::create_dir_all(&run).unwrap();
    let o = molcpt(root, &["export-plots", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!run.join("plots").exists());
    fs::write(run.join("metrics.csv"), "").unwrap();
    let o = molcpt(root, &["export-plots", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["kind"], "data");
    assert!(!run.join("plots").exists());

    let o = molcpt(root, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["kind"], "usage");
}

/// synth, pretrain, dry run, train, export: the whole CLI on a tiny model.
#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpora = root.join("corpora");
    let o = molcpt(
        root,
        &["synth", "--out", corpora.to_str().unwrap(), "--min-tokens", "6000", "--conditions", "4"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let toy = corpora.join("toy.toml");
    let cfg = RunConfig::load(&toy).unwrap();
    assert!(cfg.base_checkpoint.is_some());
    let tiny = RunConfig {
        context: 32,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        adapter_rank: 2,
        batch_size: 4,
        val_per_source: 4,
        pretrain_epochs: 0.2,
        max_epochs: 0.1,
        val_interval: 5,
        stop_at_convergence: false,
        base_checkpoint: Some(root.join("base").join("base.ckpt")),
        ..cfg
    };
    let cfg_path = root.join("tiny.toml");
    fs::write(&cfg_path, tiny.to_toml()).unwrap();
    let c = cfg_path.to_str().unwrap();

    let base = root.join("base");
    let o = molcpt(root, &["pretrain", "--config", c, "--out", base.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(base.join("base.ckpt").exists());
    assert!(stdout_json(&o)["steps"].as_u64().unwrap() > 0);

    let dry = root.join("dry");
    let o = molcpt(root, &["train", "--config", c, "--out", dry.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["steps"], 0);
    for f in ["manifest.json", "config.toml", "summary.json"] {
        assert!(dry.join(f).exists(), "{f}");
    }

    let run = root.join("run");
    let o = molcpt(root, &["train", "--config", c, "--out", run.to_str().unwrap(), "--data-seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert!(summary["steps"].as_u64().unwrap() > 0);
    assert_eq!(summary["base_hash_start"], summary["base_hash_end"]);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["data_seed"], 3);

    let o = molcpt(root, &["export-plots", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let plots = run.join("plots");
    let train_loss = fs::read_to_string(plots.join("train_loss.csv")).unwrap();
    assert!(train_loss.starts_with("step,epoch,value\n"));
    assert!(fs::read_dir(&plots)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().starts_with("val_ce.domain.")));
}

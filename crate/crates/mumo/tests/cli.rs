use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mumo::corpus::BUNDLED_CORPUS;

fn mumo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mumo"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn small_corpus(dir: &Path, n: usize) -> PathBuf {
    let lines: Vec<&str> = BUNDLED_CORPUS.lines().take(n).collect();
    write(dir, "corpus.jsonl", &(lines.join("\n") + "\n"))
}

const TINY: &str = r#"{
  "model": {"d": 16, "n_layers": 2, "n_heads": 2, "fusion_start": 2, "mpnn_iters": 1, "ffn_mult": 2},
  "pretrain": {"steps": 4, "batch_size": 4, "warmup": 1, "checkpoint_every": 2},
  "finetune": {"epochs": 2, "batch_size": 4},
  "data": {"valid_fraction": 0.25}
}"#;

#[test]
fn tokenize_is_deterministic_and_keeps_brackets() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(
        dir.path(),
        "two.jsonl",
        "{\"smiles\": \"C[C@H](N)C(=O)O\"}\n{\"smiles\": \"ClCCBr\"}\n",
    );
    let run = |out: &str| {
        let o = mumo(dir.path(), &["tokenize", "--input", input.to_str().unwrap(), "--vocab", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let (a, b) = (run("a.json"), run("b.json"));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(v["vocab"].get("[C@H]").is_some());
    assert!(v["vocab"].get("Cl").is_some());
}

#[test]
fn tokenize_rejects_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "empty.jsonl", "");
    let o = mumo(dir.path(), &["tokenize", "--input", input.to_str().unwrap(), "--vocab", "v.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mumo(dir.path(), &["pretrain", "--layers", "0"])), 1);
    assert_eq!(code(&mumo(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&mumo(dir.path(), &["--pooling", "median", "verify"])), 1);
    let bad = write(dir.path(), "bad.json", r#"{"pretrain": {"stepz": 3}}"#);
    assert_eq!(code(&mumo(dir.path(), &["--config", bad.to_str().unwrap(), "pretrain"])), 1);
    assert_eq!(code(&mumo(dir.path(), &["--help"])), 0);
}

#[test]
fn pretrain_finetune_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = small_corpus(d, 16);
    let cfg = write(d, "tiny.json", TINY);
    let c = cfg.to_str().unwrap();
    let cp = corpus.to_str().unwrap();

    // Same seed, same loss trace.
    let mut logs = Vec::new();
    for out in ["run_a", "run_b"] {
        let o = mumo(d, &["--config", c, "--seed", "3", "--out", out, "pretrain", "--corpus", cp]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        logs.push(std::fs::read_to_string(d.join(out).join("pretrain.jsonl")).unwrap());
        for f in ["pretrain.ckpt", "pretrain.ckpt.json", "pretrain-2.ckpt", "pretrain-4.ckpt"] {
            assert!(d.join(out).join(f).exists(), "{out}/{f}");
        }
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0].lines().count(), 4);

    let labelled = format!(r#"{{"data": {{"labelled": "{cp}", "valid_fraction": 0.25}}, "finetune": {{"epochs": 2, "batch_size": 4}}}}"#);
    let fcfg = write(d, "fine.json", &labelled);
    let o = mumo(
        d,
        &[
            "--config",
            fcfg.to_str().unwrap(),
            "--out",
            "fine",
            "finetune",
            "--checkpoint",
            "run_a/pretrain.ckpt",
            "--task",
            "regression",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["loaded_parameters"].as_u64().unwrap() > 0);
    assert!(report["valid"]["rmse"].as_f64().unwrap().is_finite());

    let eval = |extra: &[&str]| {
        let mut args = vec!["--config", fcfg.to_str().unwrap()];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["eval", "--checkpoint", "fine/finetune.ckpt"]);
        let o = mumo(d, &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    assert_eq!(eval(&[]), eval(&[]));
    // Modality and schedule toggles apply to a stored checkpoint.
    for flags in [&["--use-geometry", "false"][..], &["--use-graph", "false"], &["--fusion-start", "3"]] {
        let out: serde_json::Value = serde_json::from_slice(&eval(flags)).unwrap();
        assert!(out["rmse"].as_f64().unwrap().is_finite());
    }
    assert_eq!(eval(&["--use-graph", "false"]), eval(&["--fusion-start", "3"]));
}

#[test]
fn debug_dumps_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cp = small_corpus(d, 12);
    let text = format!(
        r#"{{"model": {{"d": 16, "n_layers": 2, "n_heads": 2, "fusion_start": 2, "mpnn_iters": 1}},
            "finetune": {{"epochs": 1, "batch_size": 4}}, "debug_dumps": true,
            "data": {{"labelled": "{}"}}}}"#,
        cp.to_str().unwrap()
    );
    let cfg = write(d, "c.json", &text);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&mumo(d, &["--config", c, "--out", "o", "finetune", "--task", "regression"])), 0);
    let o = mumo(d, &["--config", c, "--out", "o", "eval", "--checkpoint", "o/finetune.ckpt"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let att: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("o/dumps/attention.json")).unwrap()).unwrap();
    let kinds: Vec<&str> = att.as_array().unwrap().iter().map(|r| r["kind"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"self") && kinds.contains(&"sequence_to_structure"));
    let layers: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("o/dumps/layers.json")).unwrap()).unwrap();
    assert_eq!(layers.as_array().unwrap().len(), 2);
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cp = small_corpus(d, 8);
    let cfg = write(d, "tiny.json", TINY);
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&mumo(d, &["--config", c, "--out", "o", "pretrain", "--corpus", cp.to_str().unwrap()])), 0);
    let ckpt = d.join("o/pretrain.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() - 3]).unwrap();
    let o = mumo(d, &["--config", c, "eval", "--checkpoint", "o/pretrain.ckpt"]);
    assert_eq!(code(&o), 2);
    let o = mumo(d, &["similarity", "--checkpoint", "o/pretrain.ckpt"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn similarity_report_and_empty_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cp = small_corpus(d, 40);
    let cfg = write(d, "tiny.json", TINY);
    let c = cfg.to_str().unwrap();
    let cps = cp.to_str().unwrap();
    assert_eq!(code(&mumo(d, &["--config", c, "--out", "o", "pretrain", "--corpus", cps])), 0);
    let args = ["--seed", "4", "similarity", "--checkpoint", "o/pretrain.ckpt", "--input", cps, "--pairs", "20"];
    let a = mumo(d, &args);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, mumo(d, &args).stdout);
    let r: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(r["groups"], 5);
    let m = r["dice"]["mean_abs_r"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m));
    let o = mumo(d, &["similarity", "--checkpoint", "o/pretrain.ckpt", "--input", cps, "--pairs", "0"]);
    assert_eq!(code(&o), 2);
}

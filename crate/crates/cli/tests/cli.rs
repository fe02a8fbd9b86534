use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn motion_lm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motion-lm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = motion_lm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn analyze_pattern_reports_lengths_and_dependencies() {
    for (layout, len) in [("flatten", 12), ("parallel", 4), ("delay", 6)] {
        let v = json(&["analyze-pattern", "--layout", layout, "--levels", "3", "--steps", "4"]);
        assert_eq!(v["length"], len, "{layout}");
        assert_eq!(v["attention_pairs"], len * len);
        assert_eq!(v["dependencies"].as_array().unwrap().len(), 12);
    }
    let v = json(&["analyze-pattern", "--layout", "parallel", "--levels", "2", "--steps", "2"]);
    let row = v["dependencies"].as_array().unwrap().iter().find(|r| r["level"] == 2 && r["time"] == 2).unwrap();
    assert_eq!(row["depends_on"], serde_json::json!([[1, 1], [2, 1]]));
}

#[test]
fn count_params_agrees_for_every_variant() {
    let v = json(&["count-params", "--d-model", "4", "--d-ff", "8", "--rank", "2", "--tokens", "2"]);
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r["params"], r["params_measured"]);
        assert_eq!(r["flops"], r["flops_measured"]);
    }
    let lora = rows.iter().find(|r| r["variant"] == "lora").unwrap();
    assert_eq!(lora["params"], 256);
    assert_eq!(lora["flops"], 832);
}

#[test]
fn invalid_arguments_fail_cleanly() {
    let out = motion_lm(&["count-params", "--d-model", "4", "--rank", "4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank"));
    let out = motion_lm(&["pretrain", "--run", "/nonexistent/run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-tokenizer"));
    assert!(!motion_lm(&["analyze-pattern", "--layout", "spiral", "--levels", "2", "--steps", "2"]).status.success());
}

#[test]
fn config_file_overrides_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[backbone.block]\nd_model = 16\nd_ff = 24\n").unwrap();
    let v = json(&["--config", p(&cfg), "count-params"]);
    assert_eq!(v[0]["d_k"], 16);
    assert_eq!(v[0]["d_f"], 24);
    std::fs::write(&cfg, "[backbone]\nno_such_field = 1\nlayout = 3\n").unwrap();
    assert!(!motion_lm(&["--config", p(&cfg), "count-params"]).status.success());
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = p(&run);

    let t = json(&["--preset", "smoke", "--seed", "3", "train-tokenizer", "--run", run_s]);
    assert_eq!(t["steps"], 30);
    let cfg: Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["stage3"]["seed"], 4);

    json(&["pretrain", "--run", run_s]);
    let m = json(&["finetune", "--run", run_s]);
    assert_eq!(m["seed"], 3);
    assert!(m["metrics"]["stage3:Edit"]["bin_match"].is_number());
    for f in ["tokenizer.ckpt", "stats.json", "stage2.ckpt", "stage3.ckpt", "stage2_log.jsonl", "stage3_log.jsonl", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // Tokenize a held-out motion, decode it, caption it.
    let motions = run.join("heldout").join("motions");
    let first = std::fs::read_dir(&motions).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let tok = dir.path().join("a.tok");
    let back = dir.path().join("a.motn");
    ok(&["tokenize", "--run", run_s, "--input", p(&first), "--output", p(&tok)]);
    ok(&["detokenize", "--run", run_s, "--input", p(&tok), "--output", p(&back)]);
    assert_eq!(std::fs::metadata(&back).unwrap().len(), std::fs::metadata(&first).unwrap().len());
    ok(&["caption", "--run", run_s, "--input", p(&first)]);

    let out = dir.path().join("g.motn");
    let g = json(&["generate", "--run", run_s, "--text", "a person makes a large rising motion slowly centered", "--output", p(&out)]);
    assert_eq!(g["task"], "T2M");
    assert!(out.exists());
    let pair = "two people make a small level motion quickly offset and the other mirrors it";
    assert!(!motion_lm(&["generate", "--run", run_s, "--text", pair, "--output", p(&out)]).status.success());
    let partner = dir.path().join("h.motn");
    let g = json(&["generate", "--run", run_s, "--text", pair, "--output", p(&out), "--partner-output", p(&partner)]);
    assert_eq!(g["task"], "I-T2M");
    assert!(partner.exists());
    assert!(!motion_lm(&["generate", "--run", run_s, "--text", "a person juggles", "--output", p(&out)]).status.success());

    let plots = dir.path().join("plots");
    let listed = ok(&["report", "--run", run_s, "--out", p(&plots)]);
    assert!(listed.lines().any(|l| l.ends_with("metrics.csv")));
    assert!(plots.join("loss_curve.svg").exists());
    assert!(!motion_lm(&["report", "--run", run_s, "--out", p(&run.join("inside"))]).status.success());
}

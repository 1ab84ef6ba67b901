use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn prefdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefdiff"))
        .args(args)
        .env("PREFDIFF_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 4] = ["--set", "data.train_queries=30", "--set", "data.test_queries=10"];

#[test]
fn unknown_flag_is_a_structured_usage_error() {
    let o = prefdiff(&["gen-data", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "usage");
}

#[test]
fn missing_input_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = prefdiff(&["sft", "--out", s(dir.path())]);
    assert!(!o.status.success());
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("inputs.train"), "{e}");
}

#[test]
fn schema_violation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"stage": "gen-data", "data": {"train_querys": 3}}"#).unwrap();
    let o = prefdiff(&["gen-data", "--config", s(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr_json(&o)["error"]["message"].as_str().unwrap().contains("train_querys"));
    let o = prefdiff(&["sft", "--config", s(&cfg)]);
    assert!(stderr_json(&o)["error"]["message"].as_str().unwrap().contains("not sft"));
}

#[test]
fn gen_data_respects_flags_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["gen-data", "--seed", "9", "--out", s(out)];
        args.extend(SMALL);
        let o = prefdiff(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["metrics"]["train_queries"], 30.0);
    }
    for f in ["train.jsonl", "test.jsonl", "ground_truth.json", "report.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cfg: Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 9);
}

#[test]
fn pipeline_through_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let p = |r: &str| dir.path().join(r).to_str().unwrap().to_string();
    let model = r#"model={"layers":1,"width":8,"heads":2,"max_len":40}"#;
    let run = |args: &[&str]| {
        let o = prefdiff(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let (train, test, gt) = (p("data/train.jsonl"), p("data/test.jsonl"), p("data/ground_truth.json"));
    let (sft, rm, aligned) = (p("sft/checkpoints/final.json"), p("rm/checkpoints/final.json"), p("align/checkpoints/final.json"));
    let ann = p("ann/annotated.jsonl");

    let data = p("data");
    let mut gen = vec!["gen-data", "--out", &data];
    gen.extend(SMALL);
    run(&gen);
    run(&["sft", "--out", &p("sft"), "--train", &train, "--ground-truth", &gt, "--epochs", "1", "--set", model]);
    run(&["train-rm", "--out", &p("rm"), "--train", &train, "--test", &test, "--set", model]);
    run(&["annotate", "--out", &p("ann"), "--train", &train, "--scorer", &rm, "--source", "reward-model", "--alpha", "0.5"]);
    run(&[
        "align", "--out", &p("align"), "--train", &ann, "--sft", &sft, "--method", "kto", "--use-coefficients", "true", "--lr", "0.0005", "--set",
        model,
    ]);
    run(&[
        "eval", "--out", &p("eval"), "--test", &test, "--ground-truth", &gt, "--policy", &aligned, "--baseline", &sft, "--scorer", &rm, "--set",
        "eval.max_queries=5",
    ]);

    let report: Value = serde_json::from_slice(&std::fs::read(p("eval/report.json")).unwrap()).unwrap();
    let c = &report["eval"]["comparison"];
    let total = c["wins"].as_u64().unwrap() + c["ties"].as_u64().unwrap() + c["losses"].as_u64().unwrap();
    assert_eq!(total, 5);
    let cfg: Value = serde_json::from_slice(&std::fs::read(p("align/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["align"]["method"], "kto");
    assert_eq!(cfg["train"]["optimizer"]["lr"], 0.0005);
}

#[test]
fn experiment_twice_gives_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(
        &manifest,
        r#"{"name": "tiny", "defaults": {"model": {"layers": 1, "width": 8, "heads": 2, "max_len": 40},
            "data": {"train_queries": 30, "test_queries": 8}, "eval": {"max_response_len": 4}},
           "stages": [{"name": "data", "stage": "gen-data"},
                      {"name": "rm", "stage": "train-rm", "inputs": {"train": "data/train.jsonl", "test": "data/test.jsonl"}}]}"#,
    )
    .unwrap();
    for out in ["a", "b"] {
        let o = prefdiff(&["experiment", s(&manifest), "--seed", "4", "--out", s(&dir.path().join(out))]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a/report.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/report.csv")).unwrap());
    assert!(String::from_utf8(a).unwrap().contains("train-rm,accuracy,"));
    let o = prefdiff(&["experiment", s(&dir.path().join("missing.json"))]);
    assert_eq!(stderr_json(&o)["error"]["kind"], "io");
}

#[test]
fn verify_passes() {
    let o = prefdiff(&["verify", "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["checks"], v["passed"]);
}

use std::path::{Path, PathBuf};

use prefdiff_core::harness::config::parse_assignment;
use prefdiff_core::harness::eval::{compare_rewards, confidence_buckets};
use prefdiff_core::harness::*;
use prefdiff_core::Error;
use serde_json::json;

fn base(stage: &str, out: &Path) -> serde_json::Value {
    json!({
        "stage": stage,
        "seed": 5,
        "out": out,
        "model": {"layers": 1, "width": 8, "heads": 2, "max_len": 40},
        "data": {"train_queries": 60, "test_queries": 20, "responses_per_query": 3},
        "train": {"epochs": 2, "batch_size": 8, "optimizer": {"lr": 0.01}},
        "eval": {"max_response_len": 6, "max_queries": 10}
    })
}

fn cfg(v: serde_json::Value) -> RunConfig {
    RunConfig::from_value(v).unwrap()
}

struct World {
    dir: tempfile::TempDir,
}

impl World {
    fn new() -> Self {
        let w = World {
            dir: tempfile::tempdir().unwrap(),
        };
        run_stage(&cfg(base("gen-data", &w.p("data")))).unwrap();
        w
    }
    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
    fn stage(&self, stage: &str, out: &str, patch: serde_json::Value) -> serde_json::Value {
        let mut v = base(stage, &self.p(out));
        merge(&mut v, &patch);
        v
    }
    fn inputs(&self) -> serde_json::Value {
        json!({
            "train": self.p("data/train.jsonl"),
            "test": self.p("data/test.jsonl"),
            "ground_truth": self.p("data/ground_truth.json"),
        })
    }
    fn sft(&self) -> StageReport {
        run_stage(&cfg(self.stage("sft", "sft", json!({"inputs": self.inputs()})))).unwrap()
    }
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn run_directory_layout() {
    let w = World::new();
    let r = w.sft();
    for f in ["config.json", "report.json", "report.csv", "logs/steps.jsonl", "checkpoints/final.json", "checkpoints/epoch-1.json"] {
        assert!(w.p("sft").join(f).exists(), "{f}");
    }
    assert_eq!(r.config_digest.len(), 64);
    assert!(r.artifacts.contains_key("checkpoints/final.json"));
    let csv = String::from_utf8(read(w.p("sft/report.csv"))).unwrap();
    assert!(csv.starts_with("label,metric,value\nsft,"));
}

#[test]
fn sft_reduces_loss_and_is_reproducible() {
    let w = World::new();
    let a = w.sft();
    assert!(a.metric("loss_last_epoch").unwrap() < a.metric("loss_first_epoch").unwrap());
    let first = read(w.p("sft/checkpoints/final.json"));
    let b = run_stage(&cfg(w.stage("sft", "sft2", json!({"inputs": w.inputs()})))).unwrap();
    assert_eq!(first, read(w.p("sft2/checkpoints/final.json")));
    assert_eq!(read(w.p("sft/logs/steps.jsonl")), read(w.p("sft2/logs/steps.jsonl")));
    assert_eq!(read(w.p("sft/report.csv")), read(w.p("sft2/report.csv")));
    assert_eq!(a.artifacts, b.artifacts);
    assert_eq!(a.config_digest, b.config_digest);
}

#[test]
fn step_log_fields() {
    let w = World::new();
    w.sft();
    let ann = json!({"inputs": {"train": w.p("data/train.jsonl")}, "coefficients": {"source": "none"}});
    run_stage(&cfg(w.stage("annotate", "ann", ann))).unwrap();
    let mut inputs = w.inputs();
    inputs["train"] = json!(w.p("ann/annotated.jsonl"));
    inputs["sft"] = json!(w.p("sft/checkpoints/final.json"));
    let v = w.stage("align", "dpo", json!({"inputs": inputs, "align": {"method": "dpo", "use_coefficients": true}}));
    run_stage(&cfg(v)).unwrap();
    let text = String::from_utf8(read(w.p("dpo/logs/steps.jsonl"))).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "method", "alpha", "loss_total", "loss_components", "clamped_pair_count", "seed"] {
        assert!(first.get(key).is_some(), "{key} missing in {first}");
    }
    assert_eq!(first["method"], "dpo");
    assert_eq!(first["seed"], 5);
    // the policy starts at the reference, so every pair contributes ln 2
    let l0 = first["loss_total"].as_f64().unwrap();
    assert!((l0 - std::f64::consts::LN_2).abs() < 1e-12, "{l0}");
}

#[test]
fn unit_coefficients_reproduce_vanilla_bitwise() {
    let w = World::new();
    w.sft();
    let ann = json!({"inputs": {"train": w.p("data/train.jsonl")}, "coefficients": {"source": "none"}});
    run_stage(&cfg(w.stage("annotate", "ann", ann))).unwrap();
    for method in ["dpo", "rrhf", "kto"] {
        let mut inputs = w.inputs();
        inputs["sft"] = json!(w.p("sft/checkpoints/final.json"));
        let vanilla = w.stage("align", &format!("{method}-v"), json!({"inputs": inputs.clone(), "align": {"method": method}}));
        inputs["train"] = json!(w.p("ann/annotated.jsonl"));
        let rc = w.stage(
            "align",
            &format!("{method}-rc"),
            json!({"inputs": inputs, "align": {"method": method, "use_coefficients": true}}),
        );
        run_stage(&cfg(vanilla)).unwrap();
        run_stage(&cfg(rc)).unwrap();
        assert_eq!(
            read(w.p(&format!("{method}-v/checkpoints/final.json"))),
            read(w.p(&format!("{method}-rc/checkpoints/final.json"))),
            "{method}"
        );
    }
}

#[test]
fn rc_without_annotations_is_rejected_before_training() {
    let w = World::new();
    w.sft();
    let mut inputs = w.inputs();
    inputs["sft"] = json!(w.p("sft/checkpoints/final.json"));
    let v = w.stage("align", "bad", json!({"inputs": inputs, "align": {"method": "dpo", "use_coefficients": true}}));
    let err = run_stage(&cfg(v)).unwrap_err();
    assert!(err.to_string().contains("annotate"), "{err}");
    assert_eq!(std::fs::metadata(w.p("bad/logs/steps.jsonl")).map(|m| m.len()).unwrap_or(0), 0);
}

#[test]
fn ground_truth_scorer_is_perfect_and_self_comparison_ties() {
    let w = World::new();
    w.sft();
    let mut inputs = w.inputs();
    inputs["policy"] = json!(w.p("sft/checkpoints/final.json"));
    inputs["baseline"] = json!(w.p("sft/checkpoints/final.json"));
    let v = w.stage("eval", "eval", json!({"inputs": inputs, "eval": {"ground_truth_scorer": true}}));
    let r = run_stage(&cfg(v)).unwrap();
    let e = r.eval.as_ref().unwrap();
    let s = e.scorer.as_ref().unwrap();
    assert_eq!(s.accuracy, 1.0);
    assert_eq!(s.buckets.iter().map(|b| b.count).sum::<usize>(), s.pairs);
    let c = e.comparison.as_ref().unwrap();
    assert_eq!((c.wins, c.ties, c.losses), (0, 10, 0));
    assert_eq!(e.policy.as_ref().unwrap().queries, 10);
    assert!(e.checkpoint_digests.contains_key("policy"));
}

#[test]
fn scoring_stages_report_held_out_accuracy() {
    let w = World::new();
    let inputs = json!({"train": w.p("data/train.jsonl"), "test": w.p("data/test.jsonl")});
    let rm = run_stage(&cfg(w.stage("train-rm", "rm", json!({"inputs": inputs.clone()})))).unwrap();
    let diff = run_stage(&cfg(w.stage("train-diff", "diff", json!({"inputs": inputs})))).unwrap();
    for r in [&rm, &diff] {
        let a = r.metric("accuracy").unwrap();
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(r.metric("pairs"), Some(40.0));
    }
    assert!(diff.metric("mean_abs_self_score").is_some());
    assert!(rm.metric("mean_abs_self_score").is_none());
    let log = String::from_utf8(read(w.p("diff/logs/steps.jsonl"))).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss_total"].as_f64().unwrap().is_finite());
        assert!(v["loss_components"]["dup"].is_number());
    }
    let zero = w.stage(
        "train-diff",
        "diff0",
        json!({"inputs": {"train": w.p("data/train.jsonl")}, "diff": {"beta0": 0.0, "beta1": 0.0}}),
    );
    run_stage(&cfg(zero)).unwrap();
    let log = String::from_utf8(read(w.p("diff0/logs/steps.jsonl"))).unwrap();
    let v: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(v["loss_components"].as_object().unwrap().len(), 1);
}

#[test]
fn annotate_reports_easy_and_hard_means() {
    let w = World::new();
    run_stage(&cfg(w.stage("train-rm", "rm", json!({"inputs": {"train": w.p("data/train.jsonl")}})))).unwrap();
    let v = w.stage(
        "annotate",
        "ann",
        json!({"inputs": {"train": w.p("data/train.jsonl"), "scorer": w.p("rm/checkpoints/final.json")},
               "coefficients": {"source": "reward-model"}}),
    );
    let r = run_stage(&cfg(v)).unwrap();
    assert_eq!(r.metric("pairs"), Some(120.0));
    assert_eq!(r.metric("hard_pairs").unwrap() + r.metric("easy_pairs").unwrap(), 120.0);
    assert!(w.p("ann/annotation.json").exists());
    let wrong = w.stage(
        "annotate",
        "ann2",
        json!({"inputs": {"train": w.p("data/train.jsonl"), "scorer": w.p("rm/checkpoints/final.json")},
               "coefficients": {"source": "difference-model"}}),
    );
    assert!(matches!(run_stage(&cfg(wrong)), Err(Error::ModelMismatch(_)) | Err(Error::Checkpoint(_))));
}

#[test]
fn empty_test_set_is_rejected() {
    let w = World::new();
    std::fs::write(w.p("empty.jsonl"), "").unwrap();
    let v = w.stage(
        "eval",
        "eval",
        json!({"inputs": {"test": w.p("empty.jsonl"), "ground_truth": w.p("data/ground_truth.json")},
               "eval": {"ground_truth_scorer": true}}),
    );
    let r = run_stage(&cfg(v));
    assert!(matches!(&r, Err(Error::Ingest { message, .. }) if message == "no records"), "{r:?}");
}

#[test]
fn launch_checks_name_the_field() {
    let w = World::new();
    let missing = w.stage("sft", "x", json!({"inputs": {"train": w.p("nope.jsonl")}}));
    let err = run_stage(&cfg(missing)).unwrap_err();
    assert!(err.to_string().contains("inputs.train"), "{err}");
    let same = w.stage(
        "train-rm",
        "x",
        json!({"inputs": {"train": w.p("data/train.jsonl"), "test": w.p("data/train.jsonl")}}),
    );
    assert!(run_stage(&cfg(same)).unwrap_err().to_string().contains("inputs.test"));
    let unknown = json!({"stage": "sft", "optimiser": {}});
    assert!(RunConfig::from_value(unknown).is_err());
}

#[test]
fn overrides_and_merging() {
    let mut v = json!({"stage": "align", "align": {"method": "dpo"}});
    apply_override(&mut v, "align.alpha_unused", "1").unwrap();
    apply_override(&mut v, "train.optimizer.lr", "0.5").unwrap();
    apply_override(&mut v, "label", "dpo+rc").unwrap();
    assert_eq!(v["train"]["optimizer"]["lr"], 0.5);
    assert_eq!(v["label"], "dpo+rc");
    assert!(RunConfig::from_value(v.clone()).is_err());
    v["align"].as_object_mut().unwrap().remove("alpha_unused");
    assert_eq!(RunConfig::from_value(v).unwrap().train.optimizer.lr, 0.5);
    assert!(apply_override(&mut json!({"a": 1}), "a.b", "2").is_err());
    assert_eq!(parse_assignment("a.b=c=d").unwrap(), ("a.b", "c=d"));
    assert!(parse_assignment("novalue").is_err());
    let mut base = json!({"a": {"b": 1, "c": 2}});
    merge(&mut base, &json!({"a": {"c": 3}, "d": 4}));
    assert_eq!(base, json!({"a": {"b": 1, "c": 3}, "d": 4}));
}

#[test]
fn buckets_and_judgements() {
    let scores = [0.1, -0.2, 3.0, 0.05, -2.0, 1.0, 0.7];
    let correct = [false, true, true, false, true, true, true];
    let b = confidence_buckets(&scores, &correct, 3);
    assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), 7);
    assert!(b.windows(2).all(|w| w[0].hi <= w[1].lo));
    assert_eq!(b[0].accuracy, 0.0);
    assert_eq!(b[2].accuracy, 1.0);
    let c = compare_rewards(&[1.0, 1.0, 1.0, 0.0], &[0.0, 0.97, 1.0, 1.0], 0.05, "b");
    assert_eq!((c.wins, c.ties, c.losses), (1, 2, 1));
}

#[test]
fn experiment_manifest_runs_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let manifest: ExperimentManifest = serde_json::from_value(json!({
        "name": "mini",
        "seed": 3,
        "defaults": {
            "model": {"layers": 1, "width": 8, "heads": 2, "max_len": 40},
            "data": {"train_queries": 40, "test_queries": 10},
            "train": {"batch_size": 8},
            "eval": {"max_response_len": 4}
        },
        "stages": [
            {"name": "data", "stage": "gen-data"},
            {"name": "sft", "stage": "sft", "inputs": {"train": "data/train.jsonl", "ground_truth": "data/ground_truth.json"}},
            {"name": "dpo", "stage": "align", "label": "dpo",
             "inputs": {"train": "data/train.jsonl", "sft": "sft/checkpoints/final.json",
                        "test": "data/test.jsonl", "ground_truth": "data/ground_truth.json"}}
        ]
    }))
    .unwrap();
    let a = run_experiment(&manifest, &dir.path().join("a")).unwrap();
    let b = run_experiment(&manifest, &dir.path().join("b")).unwrap();
    assert_eq!(a.stages.len(), 3);
    assert!(a.stages.iter().all(|s| s.manifest_digest.as_deref() == Some(a.manifest_digest.as_str())));
    assert_eq!(read(dir.path().join("a/report.csv")), read(dir.path().join("b/report.csv")));
    assert_eq!(read(dir.path().join("a/dpo/checkpoints/final.json")), read(dir.path().join("b/dpo/checkpoints/final.json")));
    assert_eq!(a.stages[2].config_digest, b.stages[2].config_digest);
    assert!(a.stage("dpo").unwrap().metric("reward.greedy").is_some());
    assert!(a.stage("dpo").unwrap().metric("wins").is_some());

    let mut dup = manifest.clone();
    dup.stages.push(dup.stages[0].clone());
    assert!(run_experiment(&dup, &dir.path().join("c")).is_err());
}

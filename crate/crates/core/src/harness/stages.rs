use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::alignment::{alignment_loss, sft_loss, ReferenceSnapshot};
use crate::autodiff::Tape;
use crate::coefficients::{annotate_dataset, AnnotationStats, CoefficientConfig};
use crate::datagen::{
    demonstrations, flatten_pairs, AnnotatedPair, generate_corpus, generate_corpus_with_policy, ingest_jsonl, write_jsonl, GroundTruthReward,
    PreferenceRecord,
};
use crate::digest;
use crate::error::{Error, Result};
use crate::model::{BoundModel, DecodeStrategy, ModelKind, ParameterStore, Vocab};
use crate::optim::Adam;
use crate::scoring::{bt_reward_loss, diff_total_loss, LossGraph, PairDraw, PreferencePair};
use crate::seed;

use super::config::{RunConfig, Stage, TrainLoop};
use super::eval::{compare_rewards, decode_rewards, evaluate_policy, evaluate_scorer, test_queries, EvalReport, Scorer};
use super::run::{file_digest, write_file, RunDir, StageReport, StepLog};

/// Per-run identifiers stamped on reports.
#[derive(Clone, Debug, Default)]
pub struct RunContext {
    pub config_digest: String,
    pub manifest_digest: Option<String>,
}

/// Digest of a config, ignoring where its outputs go.
pub fn config_digest(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out = Default::default();
    digest::json_digest(&c)
}

/// Validates `cfg`, runs its stage and writes the run directory.
pub fn run_stage(cfg: &RunConfig) -> Result<StageReport> {
    let ctx = RunContext {
        config_digest: config_digest(cfg),
        manifest_digest: None,
    };
    run_stage_with(cfg, &ctx)
}

pub fn run_stage_with(cfg: &RunConfig, ctx: &RunContext) -> Result<StageReport> {
    cfg.validate()?;
    let dir = RunDir::create(&cfg.out)?;
    dir.write_config(cfg)?;
    info!("stage {} ({}) -> {}", cfg.stage.name(), cfg.label(), cfg.out.display());
    let mut report = StageReport {
        stage: cfg.stage.name().into(),
        label: cfg.label(),
        seed: cfg.seed,
        config_digest: ctx.config_digest.clone(),
        manifest_digest: ctx.manifest_digest.clone(),
        ..Default::default()
    };
    let written = match cfg.stage {
        Stage::GenData => gen_data(cfg, &mut report)?,
        Stage::Sft => sft(cfg, &dir, &mut report)?,
        Stage::TrainRm | Stage::TrainDiff => scoring(cfg, &dir, &mut report)?,
        Stage::Annotate => annotate(cfg, &dir, &mut report)?,
        Stage::Align => align(cfg, &dir, &mut report)?,
        Stage::Eval => eval(cfg, &mut report)?,
    };
    for rel in written {
        report.artifacts.insert(rel.clone(), file_digest(&dir.path(&rel))?);
    }
    if let Some(e) = &mut report.eval {
        e.label = report.label.clone();
        e.seed = cfg.seed;
        e.config_digest = ctx.config_digest.clone();
        report.metrics.extend(e.metrics());
    }
    dir.write_report(&report)?;
    Ok(report)
}

fn vocab(cfg: &RunConfig) -> Result<Vocab> {
    Vocab::new(cfg.data.vocab_size)
}

fn load_records(cfg: &RunConfig, path: &Path) -> Result<Vec<PreferenceRecord>> {
    ingest_jsonl(path, vocab(cfg)?, cfg.model.max_len)
}

fn input<'a>(p: &'a Option<std::path::PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::config(format!("inputs.{name}"), "missing"))
}

fn gen_data(cfg: &RunConfig, report: &mut StageReport) -> Result<Vec<String>> {
    let mut data = cfg.data.clone();
    data.seed = cfg.seed;
    let v = vocab(cfg)?;
    let gt = GroundTruthReward::sample(v, &data.ground_truth, seed::derive(cfg.seed, "ground-truth", 0))?;
    let corpus = match &cfg.inputs.sft {
        Some(p) => generate_corpus_with_policy(&data, &gt, &ParameterStore::load(p)?)?,
        None => generate_corpus(&data, &gt)?,
    };
    let out = &cfg.out;
    write_jsonl(&out.join("train.jsonl"), &corpus.train)?;
    write_jsonl(&out.join("test.jsonl"), &corpus.test)?;
    gt.save(&out.join("ground_truth.json"))?;
    let s = &corpus.stats;
    for (k, v) in [
        ("pairs", s.pairs),
        ("hard_pairs", s.hard_pairs),
        ("easy_pairs", s.easy_pairs),
        ("flipped_labels", s.flipped_labels),
        ("train_queries", corpus.train.len()),
        ("test_queries", corpus.test.len()),
    ] {
        report.metrics.insert(k.into(), v as f64);
    }
    Ok(vec!["train.jsonl".into(), "test.jsonl".into(), "ground_truth.json".into()])
}

/// Summary of a training loop.
#[derive(Clone, Debug, Default)]
pub struct LoopSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub epoch_means: Vec<f64>,
}

impl LoopSummary {
    fn record(&self, report: &mut StageReport) {
        report.metrics.insert("steps".into(), self.steps as f64);
        report.metrics.insert("loss_first_step".into(), self.first_loss);
        report.metrics.insert("loss_first_epoch".into(), self.epoch_means[0]);
        report.metrics.insert("loss_last_epoch".into(), *self.epoch_means.last().expect("one epoch"));
    }
}

/// Where and how a training loop runs.
pub struct LoopSpec<'a> {
    pub train: &'a TrainLoop,
    pub seed: u64,
    /// Label of the shuffling stream.
    pub stream: &'a str,
    pub dir: &'a RunDir,
}

/// Minibatch Adam over `n` items. Each epoch visits the items in an order
/// shuffled from `(seed, stream, epoch)`; `step` builds the loss for one
/// batch and may return extra fields for the step log.
pub fn train_loop<F>(store: &mut ParameterStore, n: usize, spec: LoopSpec, log: &mut StepLog, mut step: F) -> Result<LoopSummary>
where
    F: FnMut(&mut Tape, &BoundModel, &[usize], usize) -> Result<(LossGraph, Map<String, Value>)>,
{
    let LoopSpec {
        train: lp,
        seed: seed_value,
        stream,
        dir,
    } = spec;
    if n == 0 {
        return Err(Error::EmptyBatch { op: stream_op(stream) });
    }
    let mut adam = Adam::new(lp.optimizer);
    let total_steps = lp.epochs * n.div_ceil(lp.batch_size);
    let mut summary = LoopSummary::default();
    for epoch in 0..lp.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::derived_rng(seed_value, stream, epoch as u64));
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(lp.batch_size) {
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, store, true)?;
            let (graph, mut extra) = step(&mut tape, &model, batch, epoch)?;
            let bundle = graph.bundle(&tape);
            if !bundle.is_finite() {
                return Err(Error::Divergence {
                    step: summary.steps,
                    loss: bundle.total,
                });
            }
            let grads = tape.backward(graph.total)?;
            let pg = model.param_grads(&tape, &grads);
            adam.set_lr(lp.optimizer.lr * lp.schedule.factor(summary.steps, total_steps));
            let norm = adam.step(store, &pg)?;
            if !store.is_finite() {
                return Err(Error::Divergence {
                    step: summary.steps,
                    loss: f64::NAN,
                });
            }
            extra.insert("grad_norm".into(), norm.into());
            extra.insert("lr".into(), adam.lr().into());
            log.write(summary.steps, epoch, &bundle, extra)?;
            if summary.steps == 0 {
                summary.first_loss = bundle.total;
            }
            summary.steps += 1;
            sum += bundle.total;
            count += 1;
        }
        summary.epoch_means.push(sum / count as f64);
        info!("{stream}: epoch {} mean loss {:.5}", epoch + 1, sum / count as f64);
        store.save(&dir.checkpoint(&format!("epoch-{}", epoch + 1)))?;
    }
    Ok(summary)
}

fn stream_op(stream: &str) -> &'static str {
    match stream {
        "sft-shuffle" => "sft",
        "rm-shuffle" => "train-rm",
        "diff-shuffle" => "train-diff",
        _ => "align",
    }
}

fn fixed_fields(cfg: &RunConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("seed".into(), cfg.seed.into());
    m
}

fn checkpoint_names(epochs: usize) -> Vec<String> {
    let mut v: Vec<String> = (1..=epochs).map(|e| format!("checkpoints/epoch-{e}.json")).collect();
    v.push("checkpoints/final.json".into());
    v.push("logs/steps.jsonl".into());
    v
}

fn policy_eval_into(
    cfg: &RunConfig,
    policy: &ParameterStore,
    baseline: Option<(&ParameterStore, &str)>,
    report: &mut StageReport,
) -> Result<()> {
    let (Some(test), Some(gt)) = (&cfg.inputs.test, &cfg.inputs.ground_truth) else {
        return Ok(());
    };
    let gt = GroundTruthReward::load(gt)?;
    let test = load_records(cfg, test)?;
    let queries = test_queries(&test, cfg.eval.max_queries)?;
    let e = &cfg.eval;
    let mut er = report.eval.take().unwrap_or_default();
    er.policy = Some(evaluate_policy(policy, &queries, &gt, &e.decode, e.max_response_len, e.samples_per_query, cfg.seed)?);
    if let Some((base, name)) = baseline {
        let a = decode_rewards(policy, &queries, &gt, DecodeStrategy::Greedy, e.max_response_len, 1, cfg.seed)?;
        let b = decode_rewards(base, &queries, &gt, DecodeStrategy::Greedy, e.max_response_len, 1, cfg.seed)?;
        er.comparison = Some(compare_rewards(&a, &b, e.tie_delta, name));
    }
    report.eval = Some(er);
    Ok(())
}

fn sft(cfg: &RunConfig, dir: &RunDir, report: &mut StageReport) -> Result<Vec<String>> {
    let train = load_records(cfg, input(&cfg.inputs.train, "train")?)?;
    let gt = GroundTruthReward::load(input(&cfg.inputs.ground_truth, "ground_truth")?)?;
    let demos = demonstrations(&train, &gt);
    let mut store = ParameterStore::init(ModelKind::Policy, vocab(cfg)?, cfg.model, seed::derive(cfg.seed, "policy-init", 0))?;
    let initial = store.clone();
    let mut log = StepLog::create(&dir.steps_log(), fixed_fields(cfg))?;
    let summary = train_loop(&mut store, demos.len(), LoopSpec { train: &cfg.train, seed: cfg.seed, stream: "sft-shuffle", dir }, &mut log, |tape, m, idx, _| {
        let batch: Vec<_> = idx.iter().map(|&i| (&demos[i].0, &demos[i].1)).collect();
        Ok((sft_loss(tape, m, &batch)?, Map::new()))
    })?;
    log.finish()?;
    store.save(&dir.checkpoint("final"))?;
    store.save(&dir.checkpoint("reference"))?;
    summary.record(report);
    report.metrics.insert("demonstrations".into(), demos.len() as f64);
    if cfg.inputs.test.is_some() {
        let mut before = report.clone();
        policy_eval_into(cfg, &initial, None, &mut before)?;
        if let Some(p) = before.eval.and_then(|e| e.policy) {
            for (k, v) in p.mean_reward {
                report.metrics.insert(format!("init_reward.{k}"), v);
            }
        }
        policy_eval_into(cfg, &store, None, report)?;
    }
    let mut files = checkpoint_names(cfg.train.epochs);
    files.push("checkpoints/reference.json".into());
    Ok(files)
}

fn scoring(cfg: &RunConfig, dir: &RunDir, report: &mut StageReport) -> Result<Vec<String>> {
    let kind = if cfg.stage == Stage::TrainRm {
        ModelKind::Reward
    } else {
        ModelKind::Difference
    };
    let train = load_records(cfg, input(&cfg.inputs.train, "train")?)?;
    let pairs: Vec<PreferencePair> = train.iter().flat_map(|r| r.preference_pairs()).collect();
    let mut store = ParameterStore::init(kind, vocab(cfg)?, cfg.model, seed::derive(cfg.seed, "scorer-init", 0))?;
    let mut log = StepLog::create(&dir.steps_log(), fixed_fields(cfg))?;
    let mut draws: Vec<PairDraw> = Vec::new();
    let mut drawn_epoch = usize::MAX;
    let stream = if kind == ModelKind::Reward { "rm-shuffle" } else { "diff-shuffle" };
    let summary = train_loop(&mut store, pairs.len(), LoopSpec { train: &cfg.train, seed: cfg.seed, stream, dir }, &mut log, |tape, m, idx, epoch| {
        let batch: Vec<PreferencePair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let graph = if kind == ModelKind::Reward {
            bt_reward_loss(tape, m, &batch)?
        } else {
            if drawn_epoch != epoch {
                let mut rng = seed::derived_rng(cfg.seed, "diff-sampling", epoch as u64);
                draws = (0..pairs.len()).map(|_| PairDraw::draw(&mut rng)).collect();
                drawn_epoch = epoch;
            }
            let d: Vec<PairDraw> = idx.iter().map(|&i| draws[i]).collect();
            diff_total_loss(tape, m, &batch, &d, &cfg.diff)?
        };
        Ok((graph, Map::new()))
    })?;
    log.finish()?;
    store.save(&dir.checkpoint("final"))?;
    summary.record(report);
    if let Some(test) = &cfg.inputs.test {
        let test = load_records(cfg, test)?;
        report.eval = Some(EvalReport {
            scorer: Some(evaluate_scorer(&Scorer::Model(&store), &test, cfg.eval.buckets)?),
            ..EvalReport::default()
        });
    }
    Ok(checkpoint_names(cfg.train.epochs))
}

/// Sidecar written next to an annotated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMeta {
    pub coefficients: CoefficientConfig,
    pub scorer_digest: Option<String>,
    pub stats: AnnotationStats,
}

pub const ANNOTATED_FILE: &str = "annotated.jsonl";
pub const ANNOTATION_META: &str = "annotation.json";

fn annotate(cfg: &RunConfig, dir: &RunDir, report: &mut StageReport) -> Result<Vec<String>> {
    let train = load_records(cfg, input(&cfg.inputs.train, "train")?)?;
    let scorer = match (&cfg.inputs.scorer, cfg.coefficients.source.required_kind()) {
        (Some(p), Some(_)) => Some(ParameterStore::load(p)?),
        _ => None,
    };
    let (out, stats) = annotate_dataset(&train, &cfg.coefficients, scorer.as_ref())?;
    write_jsonl(&dir.path(ANNOTATED_FILE), &out)?;
    let meta = AnnotationMeta {
        coefficients: cfg.coefficients,
        scorer_digest: match (&cfg.inputs.scorer, &scorer) {
            (Some(p), Some(_)) => Some(file_digest(p)?),
            _ => None,
        },
        stats: stats.clone(),
    };
    write_file(&dir.path(ANNOTATION_META), serde_json::to_string_pretty(&meta)?.as_bytes())?;

    let pairs = flatten_pairs(&out);
    let thr = cfg.eval.hard_threshold;
    let (hard, easy): (Vec<_>, Vec<_>) = pairs.iter().partition(|p| p.gt_gap.abs() < thr);
    let m = &mut report.metrics;
    m.insert("pairs".into(), stats.pairs as f64);
    m.insert("clamped".into(), stats.clamped as f64);
    m.insert("mean_coefficient".into(), stats.mean_coefficient);
    m.insert("hard_pairs".into(), hard.len() as f64);
    m.insert("easy_pairs".into(), easy.len() as f64);
    m.insert("mean_coefficient_hard".into(), mean_of(&hard, |p| p.coefficient));
    m.insert("mean_coefficient_easy".into(), mean_of(&easy, |p| p.coefficient));
    let raw = |p: &AnnotatedPair| p.raw_difference.unwrap_or(f64::NAN);
    m.insert("mean_raw_hard".into(), mean_of(&hard, raw));
    m.insert("mean_raw_easy".into(), mean_of(&easy, raw));
    Ok(vec![ANNOTATED_FILE.into(), ANNOTATION_META.into()])
}

fn mean_of(v: &[&AnnotatedPair], f: impl Fn(&AnnotatedPair) -> f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().map(|p| f(p)).sum::<f64>() / v.len() as f64
}

fn load_meta(train: &Path) -> Result<Option<AnnotationMeta>> {
    let p = train.with_file_name(ANNOTATION_META);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn align(cfg: &RunConfig, dir: &RunDir, report: &mut StageReport) -> Result<Vec<String>> {
    let train_path = input(&cfg.inputs.train, "train")?;
    let train = load_records(cfg, train_path)?;
    let a = &cfg.align;
    if a.use_coefficients {
        if let Some(i) = train.iter().position(|r| !r.is_annotated()) {
            return Err(Error::Record {
                index: i,
                message: format!("{} needs coefficient annotations; run annotate first", a.label()),
            });
        }
    }
    let meta = load_meta(train_path)?;
    let (alpha, eps) = match (&meta, a.use_coefficients) {
        (Some(m), true) => (m.coefficients.alpha, m.coefficients.clamp_epsilon),
        (None, true) => (f64::NAN, cfg.coefficients.clamp_epsilon),
        (_, false) => (0.0, cfg.coefficients.clamp_epsilon),
    };
    let pairs = flatten_pairs(&train);
    let sft = ParameterStore::load(input(&cfg.inputs.sft, "sft")?)?;
    sft.expect_kind(ModelKind::Policy)?;
    let mut reference = ReferenceSnapshot::new(sft.clone())?;
    reference.precompute_parallel(&pairs)?;
    let mut store = sft.clone();
    let mut fixed = fixed_fields(cfg);
    fixed.insert("method".into(), a.method.name().into());
    fixed.insert("alpha".into(), json!(if alpha.is_nan() { Value::Null } else { alpha.into() }));
    let mut log = StepLog::create(&dir.steps_log(), fixed)?;
    let summary = train_loop(&mut store, pairs.len(), LoopSpec { train: &cfg.train, seed: cfg.seed, stream: "align-shuffle", dir }, &mut log, |tape, m, idx, _| {
        let batch: Vec<_> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let graph = alignment_loss(tape, m, &mut reference, &batch, a)?;
        let clamped = if a.use_coefficients {
            batch.iter().filter(|p| p.raw_difference.is_some_and(|r| r < eps)).count()
        } else {
            0
        };
        let mut extra = Map::new();
        extra.insert("clamped_pair_count".into(), clamped.into());
        Ok((graph, extra))
    })?;
    log.finish()?;
    store.save(&dir.checkpoint("final"))?;
    summary.record(report);
    let base = match &cfg.inputs.baseline {
        Some(p) => Some((ParameterStore::load(p)?, "baseline".to_string())),
        None => Some((sft, "sft".to_string())),
    };
    policy_eval_into(cfg, &store, base.as_ref().map(|(s, n)| (s, n.as_str())), report)?;
    Ok(checkpoint_names(cfg.train.epochs))
}

fn eval(cfg: &RunConfig, report: &mut StageReport) -> Result<Vec<String>> {
    let i = &cfg.inputs;
    let test = load_records(cfg, input(&i.test, "test")?)?;
    let gt_path = input(&i.ground_truth, "ground_truth")?;
    let gt = GroundTruthReward::load(gt_path)?;
    let mut er = EvalReport::default();
    let mut digests = BTreeMap::new();
    digests.insert("ground_truth".to_string(), file_digest(gt_path)?);
    digests.insert("test".to_string(), file_digest(input(&i.test, "test")?)?);
    if let Some(p) = &i.scorer {
        let store = ParameterStore::load(p)?;
        digests.insert("scorer".into(), file_digest(p)?);
        er.scorer = Some(evaluate_scorer(&Scorer::Model(&store), &test, cfg.eval.buckets)?);
    } else if cfg.eval.ground_truth_scorer {
        er.scorer = Some(evaluate_scorer(&Scorer::GroundTruth(&gt), &test, cfg.eval.buckets)?);
    }
    report.eval = Some(er);
    if let Some(p) = &i.policy {
        let policy = ParameterStore::load(p)?;
        digests.insert("policy".into(), file_digest(p)?);
        let base = match &i.baseline {
            Some(b) => {
                digests.insert("baseline".into(), file_digest(b)?);
                Some((ParameterStore::load(b)?, "baseline".to_string()))
            }
            None => None,
        };
        policy_eval_into(cfg, &policy, base.as_ref().map(|(s, n)| (s, n.as_str())), report)?;
    }
    if let Some(e) = &mut report.eval {
        e.checkpoint_digests = digests;
    }
    Ok(Vec::new())
}

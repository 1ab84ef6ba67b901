use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefdiff_core::harness::{self, ExperimentManifest, RunConfig, Stage};
use prefdiff_core::{verify, Error};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "prefdiff", version, about = "Synthetic preference data, scoring models and coefficient-weighted alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic preference corpus and its ground-truth reward.
    GenData(StageArgs),
    /// Supervised fine-tuning on the best response per query.
    Sft(StageArgs),
    /// Train a pointwise reward model.
    TrainRm(StageArgs),
    /// Train a pairwise difference model.
    TrainDiff(StageArgs),
    /// Attach reward-difference coefficients to a dataset.
    Annotate(StageArgs),
    /// Align a policy with RRHF, DPO or KTO, optionally coefficient weighted.
    Align(StageArgs),
    /// Evaluate scorers and policies on a held-out split.
    Eval(StageArgs),
    /// Run the gradient, identity, reduction and regularizer checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment manifest end to end.
    Experiment {
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct StageArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    sft: Option<PathBuf>,
    #[arg(long)]
    scorer: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Alignment method: rrhf, dpo or kto.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    use_coefficients: Option<bool>,
    /// Coefficient source: none, reward-model or difference-model.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Any config field, e.g. `--set diff.beta0=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl StageArgs {
    fn build(&self, stage: Stage) -> Result<RunConfig, Error> {
        let mut v = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => json!({}),
        };
        if !v.is_object() {
            return Err(Error::config("config", "must be a JSON object"));
        }
        match v.get("stage") {
            Some(s) if s != &json!(stage) => {
                return Err(Error::config("stage", format!("config is for {s}, not {}", stage.name())));
            }
            _ => v["stage"] = json!(stage),
        }
        let path = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
        let mut sets: Vec<(&str, Value)> = Vec::new();
        let inputs = [
            ("inputs.train", &self.train),
            ("inputs.test", &self.test),
            ("inputs.ground_truth", &self.ground_truth),
            ("inputs.sft", &self.sft),
            ("inputs.scorer", &self.scorer),
            ("inputs.policy", &self.policy),
            ("inputs.baseline", &self.baseline),
            ("out", &self.out),
        ];
        for (k, p) in inputs {
            if let Some(p) = p {
                sets.push((k, path(p)));
            }
        }
        let scalars = [
            ("seed", self.seed.map(Value::from)),
            ("label", self.label.clone().map(Value::from)),
            ("train.epochs", self.epochs.map(Value::from)),
            ("train.batch_size", self.batch_size.map(Value::from)),
            ("train.optimizer.lr", self.lr.map(Value::from)),
            ("align.method", self.method.clone().map(Value::from)),
            ("align.use_coefficients", self.use_coefficients.map(Value::from)),
            ("coefficients.source", self.source.clone().map(Value::from)),
            ("coefficients.alpha", self.alpha.map(Value::from)),
        ];
        for (k, val) in scalars {
            if let Some(val) = val {
                sets.push((k, val));
            }
        }
        for (k, val) in sets {
            harness::apply_override(&mut v, k, &val.to_string())?;
        }
        for s in &self.set {
            let (k, raw) = harness::config::parse_assignment(s)?;
            harness::apply_override(&mut v, k, raw)?;
        }
        RunConfig::from_value(v)
    }
}

fn run(cli: Cli) -> Result<Value, Error> {
    let stage = |args: StageArgs, stage: Stage| -> Result<Value, Error> {
        let cfg = args.build(stage)?;
        let report = harness::run_stage(&cfg)?;
        Ok(json!({
            "stage": report.stage,
            "label": report.label,
            "out": cfg.out,
            "metrics": report.metrics,
        }))
    };
    match cli.command {
        Command::GenData(a) => stage(a, Stage::GenData),
        Command::Sft(a) => stage(a, Stage::Sft),
        Command::TrainRm(a) => stage(a, Stage::TrainRm),
        Command::TrainDiff(a) => stage(a, Stage::TrainDiff),
        Command::Annotate(a) => stage(a, Stage::Annotate),
        Command::Align(a) => stage(a, Stage::Align),
        Command::Eval(a) => stage(a, Stage::Eval),
        Command::Verify { seed } => {
            let results = verify::run_all(seed)?;
            for r in &results {
                let mark = if r.passed { "PASS" } else { "FAIL" };
                eprintln!("{mark} {} {}", r.name, r.detail);
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::config("verify", format!("failed checks: {}", failed.join(", "))));
            }
            Ok(json!({ "checks": results.len(), "passed": results.len() }))
        }
        Command::Experiment {
            manifest,
            config,
            seed,
            out,
        } => {
            let path = manifest
                .or(config)
                .ok_or_else(|| Error::config("manifest", "a manifest path is required"))?;
            let mut m = ExperimentManifest::load(&path)?;
            if let Some(s) = seed {
                m.seed = s;
            }
            let root = out
                .or_else(|| m.out.clone())
                .unwrap_or_else(|| PathBuf::from("runs").join(&m.name));
            let report = harness::run_experiment(&m, &root)?;
            Ok(json!({
                "experiment": report.name,
                "seed": report.seed,
                "out": root,
                "manifest_digest": report.manifest_digest,
                "report": root.join("report.csv"),
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PREFDIFF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = json!({ "error": { "kind": "usage", "message": e.kind().to_string(), "detail": e.to_string() } });
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alignment::AlignConfig;
use crate::coefficients::CoefficientConfig;
use crate::datagen::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, DecodeStrategy};
use crate::optim::{AdamConfig, Schedule};
use crate::scoring::DiffTrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Sft,
    TrainRm,
    TrainDiff,
    Annotate,
    Align,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Sft => "sft",
            Stage::TrainRm => "train-rm",
            Stage::TrainDiff => "train-diff",
            Stage::Annotate => "annotate",
            Stage::Align => "align",
            Stage::Eval => "eval",
        }
    }
}

/// Input artifacts. Which ones are required depends on the stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// SFT policy: starting point and frozen reference for alignment.
    pub sft: Option<PathBuf>,
    /// Reward or difference checkpoint used for annotation or scorer evaluation.
    pub scorer: Option<PathBuf>,
    /// Policy checkpoint to evaluate.
    pub policy: Option<PathBuf>,
    /// Baseline policy for win/tie/loss counts.
    pub baseline: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLoop {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
}

impl Default for TrainLoop {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            schedule: Schedule::Constant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Ground-truth margin within which two responses tie.
    pub tie_delta: f64,
    /// Number of equal-count confidence buckets.
    pub buckets: usize,
    pub decode: Vec<DecodeStrategy>,
    /// Decodes per query for sampling strategies; greedy decodes once.
    pub samples_per_query: usize,
    pub max_response_len: usize,
    /// Pairs with `|gt_gap|` below this count as hard.
    pub hard_threshold: f64,
    /// Evaluate on at most this many test queries.
    pub max_queries: Option<usize>,
    /// Score the test pairs with the ground truth instead of a checkpoint.
    pub ground_truth_scorer: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            tie_delta: 0.05,
            buckets: 4,
            decode: vec![DecodeStrategy::Greedy, DecodeStrategy::Temperature { t: 1.0 }],
            samples_per_query: 1,
            max_response_len: 10,
            hard_threshold: 1.0,
            max_queries: None,
            ground_truth_scorer: false,
        }
    }
}

/// Complete description of one stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Row label in reports, e.g. `dpo+rc(diff)`.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default)]
    pub model: BackboneConfig,
    #[serde(default)]
    pub train: TrainLoop,
    #[serde(default)]
    pub data: CorpusConfig,
    #[serde(default)]
    pub diff: DiffTrainConfig,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub coefficients: CoefficientConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/out")
}

impl RunConfig {
    pub fn new(stage: Stage) -> Self {
        serde_json::from_value(serde_json::json!({ "stage": stage })).expect("defaults deserialize")
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| match self.stage {
            Stage::Align => self.align.label(),
            s => s.name().to_string(),
        })
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::config("config", e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Value> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    fn need(&self, field: &str, path: &Option<PathBuf>) -> Result<()> {
        match path {
            None => Err(Error::config(
                format!("inputs.{field}"),
                format!("required by stage {}", self.stage.name()),
            )),
            Some(p) if !p.exists() => Err(Error::config(format!("inputs.{field}"), format!("{} does not exist", p.display()))),
            Some(_) => Ok(()),
        }
    }

    fn optional(&self, field: &str, path: &Option<PathBuf>) -> Result<()> {
        if path.is_some() {
            self.need(field, path)?;
        }
        Ok(())
    }

    /// Checks field ranges and that every input the stage reads exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.optimizer.validate()?;
        self.train.schedule.validate()?;
        if self.train.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        self.data.validate()?;
        self.diff.validate()?;
        self.align.validate()?;
        self.coefficients.validate()?;
        if !(self.eval.tie_delta >= 0.0) {
            return Err(Error::config("eval.tie_delta", "must be nonnegative"));
        }
        if self.eval.buckets == 0 {
            return Err(Error::config("eval.buckets", "must be at least 1"));
        }
        if self.eval.samples_per_query == 0 {
            return Err(Error::config("eval.samples_per_query", "must be at least 1"));
        }
        if self.eval.max_response_len == 0 {
            return Err(Error::config("eval.max_response_len", "must be at least 1"));
        }
        let i = &self.inputs;
        for (name, p) in [("test", &i.test), ("ground_truth", &i.ground_truth), ("baseline", &i.baseline)] {
            self.optional(name, p)?;
        }
        match self.stage {
            Stage::GenData => self.optional("sft", &i.sft)?,
            Stage::Sft => {
                self.need("train", &i.train)?;
                self.need("ground_truth", &i.ground_truth)?;
            }
            Stage::TrainRm | Stage::TrainDiff => self.need("train", &i.train)?,
            Stage::Annotate => {
                self.need("train", &i.train)?;
                if self.coefficients.source.required_kind().is_some() {
                    self.need("scorer", &i.scorer)?;
                }
            }
            Stage::Align => {
                self.need("train", &i.train)?;
                self.need("sft", &i.sft)?;
            }
            Stage::Eval => {
                self.need("test", &i.test)?;
                self.need("ground_truth", &i.ground_truth)?;
                self.optional("scorer", &i.scorer)?;
                self.optional("policy", &i.policy)?;
                if i.scorer.is_none() && i.policy.is_none() && !self.eval.ground_truth_scorer {
                    return Err(Error::config("inputs", "eval needs a scorer, a policy or eval.ground_truth_scorer"));
                }
            }
        }
        if let (Some(train), Some(test)) = (&i.train, &i.test) {
            if same_file(train, test) {
                return Err(Error::config("inputs.test", "must not be the training file"));
            }
        }
        Ok(())
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

/// Sets `key` (dot separated) in a JSON config to `raw`, parsed as JSON when
/// possible and as a string otherwise.
pub fn apply_override(cfg: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = cfg;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = match cur {
            Value::Object(m) => m,
            _ => return Err(Error::config(key, format!("`{}` is not an object", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("at least one segment")
}

/// Recursively merges `patch` into `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Parses `key=value`.
pub fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::config("--set", format!("expected key=value, got `{s}`")))
}

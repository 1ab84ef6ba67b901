use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::digest;
use crate::error::{Error, Result};
use crate::scoring::LossBundle;

use super::config::RunConfig;
use super::eval::EvalReport;

/// Output directory of one stage:
/// `config.json`, `checkpoints/`, `logs/steps.jsonl`, `report.json`, `report.csv`.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for d in [root.to_path_buf(), root.join("checkpoints"), root.join("logs")] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.json"))
    }

    pub fn steps_log(&self) -> PathBuf {
        self.root.join("logs").join("steps.jsonl")
    }

    /// Writes `config.json` and returns its digest.
    pub fn write_config(&self, cfg: &RunConfig) -> Result<String> {
        let pretty = serde_json::to_string_pretty(cfg)?;
        write_file(&self.path("config.json"), pretty.as_bytes())?;
        Ok(digest::json_digest(cfg))
    }

    pub fn write_report(&self, report: &StageReport) -> Result<()> {
        let json = serde_json::to_string_pretty(report)?;
        write_file(&self.path("report.json"), json.as_bytes())?;
        write_file(&self.path("report.csv"), report.to_csv().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest::sha256_hex(&bytes))
}

/// What a stage produced: scalar metrics, artifact digests and, for
/// evaluating stages, the full evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub label: String,
    pub seed: u64,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    /// sha256 of every file written, keyed by path relative to the run dir.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

impl StageReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// `label,metric,value` rows, header first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,metric,value\n");
        self.csv_rows(&mut s);
        s
    }

    pub(crate) fn csv_rows(&self, out: &mut String) {
        for (k, v) in &self.metrics {
            out.push_str(&format!("{},{},{}\n", csv_field(&self.label), csv_field(k), v));
        }
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Line-per-step JSON log.
pub struct StepLog {
    out: BufWriter<File>,
    fixed: Map<String, Value>,
}

impl StepLog {
    /// `fixed` fields are repeated on every line.
    pub fn create(path: &Path, fixed: Map<String, Value>) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            fixed,
        })
    }

    pub fn write(&mut self, step: usize, epoch: usize, loss: &LossBundle, extra: Map<String, Value>) -> Result<()> {
        let mut line = Map::new();
        line.insert("step".into(), step.into());
        line.insert("epoch".into(), epoch.into());
        line.insert("loss_total".into(), loss.total.into());
        line.insert("loss_components".into(), serde_json::to_value(&loss.components)?);
        line.extend(self.fixed.clone());
        line.extend(extra);
        let mut text = serde_json::to_string(&line)?;
        text.push('\n');
        self.out
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("logs/steps.jsonl", e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("logs/steps.jsonl", e))
    }
}

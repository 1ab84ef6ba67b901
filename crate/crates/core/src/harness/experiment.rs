use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::digest;
use crate::error::{Error, Result};

use super::config::{merge, RunConfig};
use super::run::{write_file, StageReport};
use super::stages::{config_digest, run_stage_with, RunContext};

/// A named stage inside a manifest. Every field other than `name` is a
/// [`RunConfig`] override applied on top of the manifest defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestStage {
    pub name: String,
    #[serde(flatten)]
    pub config: Map<String, Value>,
}

/// Stages run in order under `out/<stage name>`. Relative input paths are
/// resolved against `out`, so later stages refer to earlier outputs as
/// e.g. `data/train.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub defaults: Map<String, Value>,
    pub stages: Vec<ManifestStage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub manifest_digest: String,
    pub stages: Vec<StageReport>,
}

impl ExperimentReport {
    pub fn stage(&self, label: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,metric,value\n");
        for st in &self.stages {
            st.csv_rows(&mut s);
        }
        s
    }
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn digest(&self) -> String {
        let mut m = self.clone();
        m.out = None;
        digest::json_digest(&m)
    }

    fn check(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("stages", "manifest has no stages"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.stages {
            if s.name.is_empty() || s.name.contains(['/', '\\']) || s.name.starts_with('.') {
                return Err(Error::config("stages.name", format!("`{}` is not a plain directory name", s.name)));
            }
            if !seen.insert(&s.name) {
                return Err(Error::config("stages.name", format!("duplicate stage `{}`", s.name)));
            }
        }
        Ok(())
    }

    /// Stage config before paths are resolved: defaults, overrides, the
    /// manifest seed and `out` set to the stage name.
    fn stage_value(&self, stage: &ManifestStage) -> Value {
        let mut v = Value::Object(self.defaults.clone());
        merge(&mut v, &Value::Object(stage.config.clone()));
        let obj = v.as_object_mut().expect("object");
        obj.insert("seed".into(), self.seed.into());
        obj.insert("out".into(), stage.name.clone().into());
        v
    }
}

fn resolve_inputs(v: &mut Value, root: &Path) {
    if let Some(Value::Object(inputs)) = v.get_mut("inputs") {
        for p in inputs.values_mut() {
            if let Value::String(s) = p {
                let path = Path::new(s.as_str());
                if path.is_relative() {
                    *s = root.join(path).to_string_lossy().into_owned();
                }
            }
        }
    }
    v["out"] = Value::String(root.join(v["out"].as_str().unwrap_or_default()).to_string_lossy().into_owned());
}

impl ExperimentManifest {
    /// Resolved config and digests for each stage, in order, rooted at `root`.
    pub fn stage_configs(&self, root: &Path) -> Result<Vec<(RunConfig, RunContext)>> {
        self.check()?;
        let manifest_digest = self.digest();
        self.stages
            .iter()
            .map(|stage| {
                let raw = self.stage_value(stage);
                let unresolved = RunConfig::from_value(raw.clone()).map_err(|e| Error::config(format!("stages.{}", stage.name), e.to_string()))?;
                let mut resolved = raw;
                resolve_inputs(&mut resolved, root);
                let ctx = RunContext {
                    config_digest: config_digest(&unresolved),
                    manifest_digest: Some(manifest_digest.clone()),
                };
                Ok((RunConfig::from_value(resolved)?, ctx))
            })
            .collect()
    }
}

/// Runs every stage of `manifest` under `root`. Writes `manifest.json`,
/// `report.json` and `report.csv` at the root.
pub fn run_experiment(manifest: &ExperimentManifest, root: &Path) -> Result<ExperimentReport> {
    let stages = manifest.stage_configs(root)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_file(&root.join("manifest.json"), serde_json::to_string_pretty(manifest)?.as_bytes())?;
    let mut report = ExperimentReport {
        name: manifest.name.clone(),
        seed: manifest.seed,
        manifest_digest: manifest.digest(),
        stages: Vec::new(),
    };
    for ((cfg, ctx), stage) in stages.iter().zip(&manifest.stages) {
        info!("experiment {}: stage {}", manifest.name, stage.name);
        report.stages.push(run_stage_with(cfg, ctx)?);
    }
    write_report(&report, root)?;
    Ok(report)
}

/// Writes `report.json` and `report.csv` for an experiment at `root`.
pub fn write_report(report: &ExperimentReport, root: &Path) -> Result<()> {
    write_file(&root.join("report.json"), serde_json::to_string_pretty(report)?.as_bytes())?;
    write_file(&root.join("report.csv"), report.to_csv().as_bytes())
}

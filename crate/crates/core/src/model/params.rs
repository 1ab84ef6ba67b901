use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::model::vocab::{Vocab, NUM_SEGMENTS};
use crate::seed;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Policy,
    Reward,
    Difference,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Policy => "policy",
            ModelKind::Reward => "reward",
            ModelKind::Difference => "difference",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of the shared transformer backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            max_len: 128,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(
                "width",
                format!("width {} must be a positive multiple of heads {}", self.width, self.heads),
            ));
        }
        if self.max_len < 4 {
            return Err(Error::config("max_len", "must be at least 4"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model_kind: ModelKind,
    pub vocab_size: usize,
    pub config: BackboneConfig,
    pub seed: u64,
    pub format_version: u32,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Named parameter arrays of one model plus the metadata needed to rebuild it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    meta: ModelMeta,
    params: BTreeMap<String, Array>,
}

const HEAD_STD: f64 = 0.02;

fn layout(kind: ModelKind, vocab: usize, cfg: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.width;
    // fan-in scaling; projections into the residual stream shrink with depth
    let w_std = 1.0 / (d as f64).sqrt();
    let resid_std = w_std / (2.0 * cfg.layers as f64).sqrt();
    let mut out = vec![
        ("tok_emb".to_string(), vec![vocab, d], Init::Normal(1.0)),
        ("pos_emb".to_string(), vec![cfg.max_len, d], Init::Normal(0.1)),
        ("seg_emb".to_string(), vec![NUM_SEGMENTS, d], Init::Normal(1.0)),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal(w_std)),
            (p("attn.wk"), vec![d, d], Init::Normal(w_std)),
            (p("attn.wv"), vec![d, d], Init::Normal(w_std)),
            (p("attn.wo"), vec![d, d], Init::Normal(resid_std)),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, 4 * d], Init::Normal(w_std)),
            (p("mlp.b1"), vec![4 * d], Init::Zeros),
            (p("mlp.w2"), vec![4 * d, d], Init::Normal(resid_std / 2.0)),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.push(("ln_f.gain".into(), vec![d], Init::Ones));
    out.push(("ln_f.bias".into(), vec![d], Init::Zeros));
    match kind {
        ModelKind::Policy => {
            out.push(("lm_head.weight".into(), vec![d, vocab], Init::Normal(HEAD_STD)));
            out.push(("lm_head.bias".into(), vec![vocab], Init::Zeros));
        }
        ModelKind::Reward | ModelKind::Difference => {
            out.push(("score_head.weight".into(), vec![d, 1], Init::Normal(HEAD_STD)));
            out.push(("score_head.bias".into(), vec![1], Init::Zeros));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedArray {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    meta: ModelMeta,
    params: BTreeMap<String, EncodedArray>,
}

fn encode_f64s(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(name: &str, s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Checkpoint(format!("{name}: bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "{name}: {} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl ParameterStore {
    /// Freshly initialised parameters for `kind`.
    pub fn init(kind: ModelKind, vocab: Vocab, config: BackboneConfig, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::derived_rng(seed_value, "init", 0);
        let mut params = BTreeMap::new();
        for (name, shape, init) in layout(kind, vocab.size, &config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            params.insert(name, Array::new(shape, data)?);
        }
        Ok(Self {
            meta: ModelMeta {
                model_kind: kind,
                vocab_size: vocab.size,
                config,
                seed: seed_value,
                format_version: FORMAT_VERSION,
            },
            params,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn kind(&self) -> ModelKind {
        self.meta.model_kind
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.meta.config
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            size: self.meta.vocab_size,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Adds seeded `N(0, std)` noise to every parameter. Used to move away
    /// from the near-symmetric initial point in gradient checks.
    pub fn perturb(&mut self, std: f64, seed_value: u64) {
        let mut rng = seed::derived_rng(seed_value, "perturb", 0);
        let dist = Normal::new(0.0, std).expect("finite std");
        for a in self.params.values_mut() {
            for v in a.data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Array::is_finite)
    }

    /// Same kind, vocabulary and backbone shape.
    pub fn check_compatible(&self, other: &ParameterStore) -> Result<()> {
        if self.meta.vocab_size != other.meta.vocab_size {
            return Err(Error::ModelMismatch(format!(
                "vocab size {} vs {}",
                self.meta.vocab_size, other.meta.vocab_size
            )));
        }
        if self.meta.config != other.meta.config || self.meta.model_kind != other.meta.model_kind {
            return Err(Error::ModelMismatch(format!(
                "{} {:?} vs {} {:?}",
                self.meta.model_kind, self.meta.config, other.meta.model_kind, other.meta.config
            )));
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind() != kind {
            return Err(Error::ModelMismatch(format!(
                "expected a {kind} model, got {}",
                self.kind()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            meta: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        EncodedArray {
                            shape: v.shape().to_vec(),
                            data: encode_f64s(v.data()),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(s)?;
        if file.meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                file.meta.format_version
            )));
        }
        file.meta.config.validate()?;
        let mut params = BTreeMap::new();
        for (name, enc) in file.params {
            let data = decode_f64s(&name, &enc.data)?;
            let arr = Array::new(enc.shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            params.insert(name, arr);
        }
        let expected = layout(file.meta.model_kind, file.meta.vocab_size, &file.meta.config);
        for (name, shape, _) in &expected {
            match params.get(name) {
                None => return Err(Error::MissingParameter(name.clone())),
                Some(a) if a.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        a.shape()
                    )))
                }
                _ => {}
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters present, {} expected",
                params.len(),
                expected.len()
            )));
        }
        Ok(Self {
            meta: file.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = self.to_json()?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

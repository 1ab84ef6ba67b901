//! Synthetic preference corpora with an exact ground-truth reward, and the
//! JSONL dataset format shared with external data.
//!
//! The ground truth is
//! `r*(x, y) = sum_t w[y_t] + echo * #{t : y_t in x} - penalty * max(0, |y| - target)`.
//! Responses are drawn from tempered token distributions `softmax(tau * w)`
//! with a per-response `tau`, so quality varies smoothly across responses.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DecodeStrategy, Evaluator, ParameterStore, TokenId, TokenSequence, Vocab};
use crate::scoring::{LabelSource, PreferencePair};
use crate::seed::{self, Rng};

/// Parameters of the ground-truth reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthConfig {
    /// Standard deviation of the per-token weights.
    pub weight_std: f64,
    /// Bonus per response token that also occurs in the query.
    pub echo_bonus: f64,
    /// Penalty per response token beyond `target_len`.
    pub length_penalty: f64,
    pub target_len: usize,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            weight_std: 1.0,
            echo_bonus: 1.0,
            length_penalty: 0.5,
            target_len: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthReward {
    /// One weight per token id; special ids carry weight zero.
    pub weights: Vec<f64>,
    pub echo_bonus: f64,
    pub length_penalty: f64,
    pub target_len: usize,
    pub seed: u64,
}

impl GroundTruthReward {
    pub fn sample(vocab: Vocab, cfg: &GroundTruthConfig, seed_value: u64) -> Result<Self> {
        if !(cfg.weight_std >= 0.0) {
            return Err(Error::config("weight_std", "must be nonnegative"));
        }
        let mut rng = seed::derived_rng(seed_value, "ground-truth", 0);
        let mut weights = vec![0.0; vocab.size];
        if cfg.weight_std > 0.0 {
            let dist = Normal::new(0.0, cfg.weight_std).expect("valid std");
            for id in vocab.content_ids() {
                weights[id as usize] = dist.sample(&mut rng);
            }
        }
        Ok(Self {
            weights,
            echo_bonus: cfg.echo_bonus,
            length_penalty: cfg.length_penalty,
            target_len: cfg.target_len,
            seed: seed_value,
        })
    }

    /// All-zero reward over `vocab`.
    pub fn zero(vocab: Vocab) -> Self {
        Self {
            weights: vec![0.0; vocab.size],
            echo_bonus: 0.0,
            length_penalty: 0.0,
            target_len: 0,
            seed: 0,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            size: self.weights.len(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// `r*(x, y)`.
pub fn ground_truth_reward(gt: &GroundTruthReward, x: &TokenSequence, y: &TokenSequence) -> f64 {
    let mut in_query = vec![false; gt.weights.len()];
    for &t in x.ids() {
        in_query[t as usize] = true;
    }
    let mut total = 0.0;
    let mut echoes = 0usize;
    for &t in y.ids() {
        total += gt.weights[t as usize];
        if in_query[t as usize] {
            echoes += 1;
        }
    }
    let excess = y.len().saturating_sub(gt.target_len);
    total + gt.echo_bonus * echoes as f64 - gt.length_penalty * excess as f64
}

/// Label noise model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LabelNoise {
    Clean,
    Bt { temperature: f64 },
}

/// Inclusive length range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LenRange {
    pub min: usize,
    pub max: usize,
}

impl LenRange {
    fn sample(&self, rng: &mut Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    /// Responses per query. Pairs compare response 0 against each other one.
    pub responses_per_query: usize,
    pub query_len: LenRange,
    pub response_len: LenRange,
    pub label_noise: LabelNoise,
    /// Fraction of pairs whose ground-truth gap must be below `hard_threshold`.
    pub hard_fraction: f64,
    pub hard_threshold: f64,
    /// Resampling attempts per pair before giving up on its hardness target.
    pub attempts_per_pair: usize,
    /// Response temperatures are drawn from `U(-max_tilt, max_tilt)`.
    pub max_tilt: f64,
    /// Probability that a response token is copied from the query.
    pub echo_prob: f64,
    pub ground_truth: GroundTruthConfig,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocab::DEFAULT_SIZE,
            train_queries: 2000,
            test_queries: 500,
            responses_per_query: 2,
            query_len: LenRange { min: 3, max: 8 },
            response_len: LenRange { min: 3, max: 10 },
            label_noise: LabelNoise::Clean,
            hard_fraction: 0.0,
            hard_threshold: 1.0,
            attempts_per_pair: 200,
            max_tilt: 1.5,
            echo_prob: 0.2,
            ground_truth: GroundTruthConfig::default(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab_size)?;
        if self.responses_per_query < 2 {
            return Err(Error::config("responses_per_query", "must be at least 2"));
        }
        if self.train_queries == 0 || self.test_queries == 0 {
            return Err(Error::config("train_queries/test_queries", "must be positive"));
        }
        for (name, r) in [("query_len", self.query_len), ("response_len", self.response_len)] {
            if r.min == 0 || r.min > r.max {
                return Err(Error::config(name, "needs 1 <= min <= max"));
            }
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::config("hard_fraction", "must lie in [0, 1]"));
        }
        if !(self.hard_threshold > 0.0) {
            return Err(Error::config("hard_threshold", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.echo_prob) {
            return Err(Error::config("echo_prob", "must lie in [0, 1]"));
        }
        if let LabelNoise::Bt { temperature } = self.label_noise {
            if !(temperature > 0.0) {
                return Err(Error::config("label_noise.temperature", "must be positive"));
            }
        }
        if self.attempts_per_pair == 0 {
            return Err(Error::config("attempts_per_pair", "must be at least 1"));
        }
        Ok(())
    }

    /// Length of the longest pairwise input this config can produce.
    pub fn max_pairwise_len(&self) -> usize {
        self.query_len.max + 2 * self.response_len.max + 4
    }
}

/// One comparison inside a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordPair {
    pub w: usize,
    pub l: usize,
    pub source: LabelSource,
    /// `r*(x, y_w) - r*(x, y_l)`; negative when a noisy label disagrees.
    pub gt_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_difference: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<f64>,
}

/// A query, its responses and the labelled comparisons among them.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceRecord {
    pub query: TokenSequence,
    pub responses: Vec<TokenSequence>,
    pub pairs: Vec<RecordPair>,
}

/// A pair flattened out of its record, with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedPair {
    pub pair: PreferencePair,
    pub gt_gap: f64,
    pub raw_difference: Option<f64>,
    /// `R^alpha`; 1 when the dataset carries no annotation.
    pub coefficient: f64,
}

impl PreferenceRecord {
    pub fn preference_pairs(&self) -> Vec<PreferencePair> {
        self.pairs
            .iter()
            .map(|p| PreferencePair {
                query: self.query.clone(),
                y_w: self.responses[p.w].clone(),
                y_l: self.responses[p.l].clone(),
                source: p.source,
            })
            .collect()
    }

    pub fn is_annotated(&self) -> bool {
        self.pairs.iter().all(|p| p.coefficient.is_some())
    }
}

/// All pairs of a dataset in record order.
pub fn flatten_pairs(records: &[PreferenceRecord]) -> Vec<AnnotatedPair> {
    records
        .iter()
        .flat_map(|r| {
            r.preference_pairs().into_iter().zip(&r.pairs).map(|(pair, rp)| AnnotatedPair {
                pair,
                gt_gap: rp.gt_gap,
                raw_difference: rp.raw_difference,
                coefficient: rp.coefficient.unwrap_or(1.0),
            })
        })
        .collect()
}

/// A generated corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<PreferenceRecord>,
    pub test: Vec<PreferenceRecord>,
    pub ground_truth: GroundTruthReward,
    pub stats: CorpusStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub hard_pairs: usize,
    pub easy_pairs: usize,
    /// Pairs whose label disagrees with the ground-truth gap sign.
    pub flipped_labels: usize,
}

struct Sampler<'a> {
    cfg: &'a CorpusConfig,
    gt: &'a GroundTruthReward,
    vocab: Vocab,
    content: Vec<TokenId>,
    /// Decodes responses `2..K` when set.
    policy: Option<Evaluator>,
}

impl Sampler<'_> {
    fn query(&self, rng: &mut Rng) -> TokenSequence {
        let n = self.cfg.query_len.sample(rng);
        let ids = (0..n)
            .map(|_| self.content[rng.random_range(0..self.content.len())])
            .collect();
        TokenSequence::query(ids, &self.vocab).expect("content ids")
    }

    fn tilted(&self, x: &TokenSequence, rng: &mut Rng) -> TokenSequence {
        let tilt = rng.random_range(-self.cfg.max_tilt..=self.cfg.max_tilt);
        let weights: Vec<f64> = self
            .content
            .iter()
            .map(|&t| (tilt * self.gt.weights[t as usize]).exp())
            .collect();
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        let n = self.cfg.response_len.sample(rng);
        let ids = (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.cfg.echo_prob {
                    x.ids()[rng.random_range(0..x.len())]
                } else {
                    self.content[dist.sample(rng)]
                }
            })
            .collect();
        TokenSequence::response(ids, &self.vocab).expect("content ids")
    }

    /// `y` with one token replaced; used when fresh samples keep missing a
    /// narrow gap target.
    fn edit(&self, y: &TokenSequence, rng: &mut Rng) -> TokenSequence {
        let mut ids = y.ids().to_vec();
        let i = rng.random_range(0..ids.len());
        ids[i] = self.content[rng.random_range(0..self.content.len())];
        TokenSequence::response(ids, &self.vocab).expect("content ids")
    }

    fn response(&mut self, x: &TokenSequence, index: usize, rng: &mut Rng) -> Result<TokenSequence> {
        match &mut self.policy {
            Some(ev) if index >= 2 => {
                let s: u64 = rng.random();
                model::sample_with(ev, x, DecodeStrategy::Temperature { t: 1.0 }, self.cfg.response_len.max, s)
            }
            _ => Ok(self.tilted(x, rng)),
        }
    }
}

/// Probability that a Bradley-Terry labeller prefers the response with the
/// higher ground truth, given the absolute gap.
pub fn bt_agree_probability(abs_gap: f64, temperature: f64) -> f64 {
    1.0 / (1.0 + (-abs_gap / temperature).exp())
}

/// Draws whether a Bradley-Terry label disagrees with the ground truth.
pub fn bt_flip(abs_gap: f64, temperature: f64, rng: &mut Rng) -> bool {
    rng.random::<f64>() >= bt_agree_probability(abs_gap, temperature)
}

/// Smallest |gap| treated as a strict preference; closer pairs count as ties
/// and are resampled.
const TIE_EPS: f64 = 1e-9;

/// Generates train and test splits with disjoint queries.
pub fn generate_corpus(cfg: &CorpusConfig, gt: &GroundTruthReward) -> Result<Corpus> {
    generate_inner(cfg, gt, None)
}

/// Like [`generate_corpus`], but responses `2..K` are decoded from `policy`
/// at temperature 1 instead of the tilted token distributions.
pub fn generate_corpus_with_policy(cfg: &CorpusConfig, gt: &GroundTruthReward, policy: &ParameterStore) -> Result<Corpus> {
    policy.expect_kind(model::ModelKind::Policy)?;
    generate_inner(cfg, gt, Some(policy))
}

fn generate_inner(cfg: &CorpusConfig, gt: &GroundTruthReward, policy: Option<&ParameterStore>) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg.vocab_size)?;
    if gt.weights.len() != vocab.size {
        return Err(Error::config(
            "ground_truth",
            format!("{} weights for vocab size {}", gt.weights.len(), vocab.size),
        ));
    }
    let policy = policy.map(Evaluator::new).transpose()?;
    let mut sampler = Sampler {
        cfg,
        gt,
        vocab,
        content: vocab.content_ids().collect(),
        policy,
    };

    let total = cfg.train_queries + cfg.test_queries;
    let mut seen: HashSet<Vec<TokenId>> = HashSet::with_capacity(total);
    let mut records = Vec::with_capacity(total);
    let mut stats = CorpusStats::default();
    let mut wanted = (0usize, 0usize);
    let mut failed = false;

    for q in 0..total {
        let mut rng = seed::derived_rng(cfg.seed, "query", q as u64);
        let mut x = sampler.query(&mut rng);
        let mut tries = 0;
        while !seen.insert(x.ids().to_vec()) {
            tries += 1;
            if tries > 1000 {
                return Err(Error::config("query_len", "query space too small for disjoint splits"));
            }
            x = sampler.query(&mut rng);
        }

        let k = cfg.responses_per_query;
        let mut responses = Vec::with_capacity(k);
        responses.push(sampler.response(&x, 0, &mut rng)?);
        let base = ground_truth_reward(gt, &x, &responses[0]);
        let mut pairs = Vec::with_capacity(k - 1);
        for j in 1..k {
            let hard = rng.random::<f64>() < cfg.hard_fraction;
            if hard {
                wanted.0 += 1;
            } else {
                wanted.1 += 1;
            }
            let mut found = None;
            for attempt in 0..cfg.attempts_per_pair {
                let y = if hard && attempt >= cfg.attempts_per_pair / 2 {
                    sampler.edit(&responses[0], &mut rng)
                } else {
                    sampler.response(&x, j, &mut rng)?
                };
                let gap = base - ground_truth_reward(gt, &x, &y);
                let ok = gap.abs() > TIE_EPS
                    && (gap.abs() < cfg.hard_threshold) == hard
                    && !responses.contains(&y);
                if ok {
                    found = Some((y, gap));
                    break;
                }
            }
            let Some((y, gap)) = found else {
                failed = true;
                continue;
            };
            if hard {
                stats.hard_pairs += 1;
            } else {
                stats.easy_pairs += 1;
            }
            let (first_wins, source) = match cfg.label_noise {
                LabelNoise::Clean => (gap > 0.0, LabelSource::Clean),
                LabelNoise::Bt { temperature } => {
                    let flip = bt_flip(gap.abs(), temperature, &mut rng);
                    ((gap > 0.0) != flip, LabelSource::Bt)
                }
            };
            if first_wins != (gap > 0.0) {
                stats.flipped_labels += 1;
            }
            responses.push(y);
            let (w, l, gt_gap) = if first_wins { (0, j, gap) } else { (j, 0, -gap) };
            pairs.push(RecordPair {
                w,
                l,
                source,
                gt_gap,
                raw_difference: None,
                coefficient: None,
            });
        }
        if !failed {
            records.push(PreferenceRecord {
                query: x,
                responses,
                pairs,
            });
        }
    }
    if failed {
        return Err(Error::InfeasibleHardness {
            wanted_hard: wanted.0,
            wanted_easy: wanted.1,
            achieved_hard: stats.hard_pairs,
            achieved_easy: stats.easy_pairs,
        });
    }
    stats.pairs = stats.hard_pairs + stats.easy_pairs;
    let test = records.split_off(cfg.train_queries);
    Ok(Corpus {
        train: records,
        test,
        ground_truth: gt.clone(),
        stats,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    query: Vec<TokenId>,
    responses: Vec<Vec<TokenId>>,
    pairs: Vec<RecordPair>,
}

fn to_json(r: &PreferenceRecord) -> RecordJson {
    RecordJson {
        query: r.query.ids().to_vec(),
        responses: r.responses.iter().map(|y| y.ids().to_vec()).collect(),
        pairs: r.pairs.clone(),
    }
}

/// Checks one record against the schema invariants.
pub fn validate_record(r: &PreferenceRecord, max_len: usize) -> std::result::Result<(), String> {
    if r.responses.len() < 2 {
        return Err(format!("{} responses, need at least 2", r.responses.len()));
    }
    if r.pairs.is_empty() {
        return Err("no pairs".into());
    }
    for (i, p) in r.pairs.iter().enumerate() {
        if p.w >= r.responses.len() || p.l >= r.responses.len() {
            return Err(format!("pair {i}: index out of range for {} responses", r.responses.len()));
        }
        if p.w == p.l {
            return Err(format!("pair {i}: winner == loser (tie or self-pair)"));
        }
        if r.responses[p.w] == r.responses[p.l] {
            return Err(format!("pair {i}: identical responses (tie)"));
        }
        if !p.gt_gap.is_finite() {
            return Err(format!("pair {i}: gt_gap is not finite"));
        }
        if let Some(c) = p.coefficient {
            if !(c > 0.0) || !c.is_finite() {
                return Err(format!("pair {i}: coefficient {c} is not positive"));
            }
        }
        if let Some(d) = p.raw_difference {
            if !d.is_finite() {
                return Err(format!("pair {i}: raw_difference is not finite"));
            }
        }
        let len = r.query.len() + r.responses[p.w].len() + r.responses[p.l].len() + 4;
        if len > max_len {
            return Err(format!("pair {i}: pairwise input of {len} tokens exceeds max length {max_len}"));
        }
    }
    Ok(())
}

/// Writes records as JSONL, one per line, in order.
pub fn write_jsonl(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, &to_json(r))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a JSONL dataset. Any bad line fails the whole read.
pub fn ingest_jsonl(path: &Path, vocab: Vocab, max_len: usize) -> Result<Vec<PreferenceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let err = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordJson = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let query = TokenSequence::query(raw.query, &vocab).map_err(|e| err(e.to_string()))?;
        let responses = raw
            .responses
            .into_iter()
            .enumerate()
            .map(|(j, ids)| TokenSequence::response(ids, &vocab).map_err(|e| err(format!("response {j}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let record = PreferenceRecord {
            query,
            responses,
            pairs: raw.pairs,
        };
        validate_record(&record, max_len).map_err(err)?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            line: 0,
            message: "no records".into(),
        });
    }
    Ok(records)
}

/// Top-ground-truth response of every record, as SFT demonstrations.
pub fn demonstrations(records: &[PreferenceRecord], gt: &GroundTruthReward) -> Vec<(TokenSequence, TokenSequence)> {
    records
        .iter()
        .map(|r| {
            let best = r
                .responses
                .iter()
                .max_by(|a, b| {
                    ground_truth_reward(gt, &r.query, a).total_cmp(&ground_truth_reward(gt, &r.query, b))
                })
                .expect("records have responses");
            (r.query.clone(), best.clone())
        })
        .collect()
}

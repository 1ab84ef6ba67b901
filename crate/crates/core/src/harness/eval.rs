use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{ground_truth_reward, AnnotatedPair, GroundTruthReward, PreferenceRecord};
use crate::error::{Error, Result};
use crate::model::{self, DecodeStrategy, Evaluator, ModelKind, ParameterStore, TokenSequence};
use crate::parallel::par_map;
use crate::seed;

/// Accuracy of pairs whose `|score|` falls in `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerEval {
    pub scorer: String,
    pub pairs: usize,
    /// Fraction of pairs whose score sign matches the ground-truth preference.
    pub accuracy: f64,
    pub buckets: Vec<Bucket>,
    /// Mean `|f(x, y, y)|` over test responses, for difference models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_abs_self_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub queries: usize,
    /// Mean ground-truth reward of decoded responses, keyed by strategy label.
    pub mean_reward: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub tie_delta: f64,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub seed: u64,
    pub config_digest: String,
    pub checkpoint_digests: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

impl EvalReport {
    /// Flat metric names used in CSV rows.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        if let Some(s) = &self.scorer {
            m.insert("accuracy".into(), s.accuracy);
            m.insert("pairs".into(), s.pairs as f64);
            for (i, b) in s.buckets.iter().enumerate() {
                m.insert(format!("bucket{i}.lo"), b.lo);
                m.insert(format!("bucket{i}.hi"), b.hi);
                m.insert(format!("bucket{i}.count"), b.count as f64);
                m.insert(format!("bucket{i}.accuracy"), b.accuracy);
            }
            if let Some(v) = s.mean_abs_self_score {
                m.insert("mean_abs_self_score".into(), v);
            }
        }
        if let Some(p) = &self.policy {
            m.insert("queries".into(), p.queries as f64);
            for (k, v) in &p.mean_reward {
                m.insert(format!("reward.{k}"), *v);
            }
        }
        if let Some(c) = &self.comparison {
            m.insert("wins".into(), c.wins as f64);
            m.insert("ties".into(), c.ties as f64);
            m.insert("losses".into(), c.losses as f64);
        }
        m
    }
}

/// Something that assigns a signed preference score to a pair.
pub enum Scorer<'a> {
    GroundTruth(&'a GroundTruthReward),
    Model(&'a ParameterStore),
}

impl Scorer<'_> {
    pub fn name(&self) -> String {
        match self {
            Scorer::GroundTruth(_) => "ground-truth".into(),
            Scorer::Model(s) => s.kind().name().into(),
        }
    }
}

/// Signed score per pair: positive means the scorer prefers `y_w`.
pub fn score_pairs(scorer: &Scorer, pairs: &[AnnotatedPair]) -> Result<Vec<f64>> {
    match scorer {
        Scorer::GroundTruth(gt) => Ok(pairs
            .iter()
            .map(|p| ground_truth_reward(gt, &p.pair.query, &p.pair.y_w) - ground_truth_reward(gt, &p.pair.query, &p.pair.y_l))
            .collect()),
        Scorer::Model(store) => {
            let kind = store.kind();
            if kind == ModelKind::Policy {
                return Err(Error::ModelMismatch("a policy checkpoint cannot score pairs".into()));
            }
            par_map(
                pairs,
                || Evaluator::new(store),
                |ev, _, p| {
                    let (x, w, l) = (&p.pair.query, &p.pair.y_w, &p.pair.y_l);
                    match kind {
                        ModelKind::Reward => Ok(ev.reward(x, w)? - ev.reward(x, l)?),
                        _ => ev.difference(x, w, l),
                    }
                },
            )
        }
    }
}

/// Splits pairs into `n` equal-count buckets by `|score|`.
pub fn confidence_buckets(scores: &[f64], correct: &[bool], n: usize) -> Vec<Bucket> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].abs().total_cmp(&scores[b].abs()).then(a.cmp(&b)));
    let n = n.min(order.len()).max(1);
    (0..n)
        .filter_map(|k| {
            let part = &order[k * order.len() / n..(k + 1) * order.len() / n];
            let first = *part.first()?;
            let last = *part.last()?;
            let hits = part.iter().filter(|&&i| correct[i]).count();
            Some(Bucket {
                lo: scores[first].abs(),
                hi: scores[last].abs(),
                count: part.len(),
                accuracy: hits as f64 / part.len() as f64,
            })
        })
        .collect()
}

/// Pairwise accuracy against the ground-truth preference, with confidence
/// buckets. Pairs with a zero ground-truth gap are skipped.
pub fn evaluate_scorer(scorer: &Scorer, test: &[PreferenceRecord], buckets: usize) -> Result<ScorerEval> {
    let pairs: Vec<AnnotatedPair> = crate::datagen::flatten_pairs(test)
        .into_iter()
        .filter(|p| p.gt_gap != 0.0)
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyBatch { op: "evaluate" });
    }
    let scores = score_pairs(scorer, &pairs)?;
    let correct: Vec<bool> = scores.iter().zip(&pairs).map(|(s, p)| (*s > 0.0) == (p.gt_gap > 0.0)).collect();
    let hits = correct.iter().filter(|&&c| c).count();
    let mean_abs_self_score = match scorer {
        Scorer::Model(store) if store.kind() == ModelKind::Difference => {
            let items: Vec<(&TokenSequence, &TokenSequence)> =
                test.iter().flat_map(|r| r.responses.iter().map(move |y| (&r.query, y))).collect();
            let v = par_map(&items, || Evaluator::new(store), |ev, _, (x, y)| Ok(ev.difference(x, y, y)?.abs()))?;
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
        _ => None,
    };
    Ok(ScorerEval {
        scorer: scorer.name(),
        pairs: pairs.len(),
        accuracy: hits as f64 / pairs.len() as f64,
        buckets: confidence_buckets(&scores, &correct, buckets),
        mean_abs_self_score,
    })
}

/// Distinct test queries in file order, capped at `max`.
pub fn test_queries(test: &[PreferenceRecord], max: Option<usize>) -> Result<Vec<TokenSequence>> {
    let mut qs: Vec<TokenSequence> = test.iter().map(|r| r.query.clone()).collect();
    qs.dedup();
    if let Some(m) = max {
        qs.truncate(m);
    }
    if qs.is_empty() {
        return Err(Error::EmptyBatch { op: "evaluate" });
    }
    Ok(qs)
}

/// Mean ground-truth reward of `samples` decodes per query (one for greedy).
/// Sampling seeds depend only on `(seed, strategy, query, sample)` so
/// different policies are compared on the same random streams.
pub fn decode_rewards(
    policy: &ParameterStore,
    queries: &[TokenSequence],
    gt: &GroundTruthReward,
    strategy: DecodeStrategy,
    max_len: usize,
    samples: usize,
    seed_value: u64,
) -> Result<Vec<f64>> {
    policy.expect_kind(ModelKind::Policy)?;
    let label = format!("decode:{}", strategy.label());
    let samples = if strategy == DecodeStrategy::Greedy { 1 } else { samples.max(1) };
    par_map(
        queries,
        || Evaluator::new(policy),
        |ev, q, x| {
            let mut total = 0.0;
            for k in 0..samples {
                let s = seed::derive(seed_value, &label, (q * samples + k) as u64);
                let y = model::sample_with(ev, x, strategy, max_len, s)?;
                total += ground_truth_reward(gt, x, &y);
            }
            Ok(total / samples as f64)
        },
    )
}

pub fn evaluate_policy(
    policy: &ParameterStore,
    queries: &[TokenSequence],
    gt: &GroundTruthReward,
    strategies: &[DecodeStrategy],
    max_len: usize,
    samples: usize,
    seed_value: u64,
) -> Result<PolicyEval> {
    let mut mean_reward = BTreeMap::new();
    for &s in strategies {
        let r = decode_rewards(policy, queries, gt, s, max_len, samples, seed_value)?;
        mean_reward.insert(s.label(), r.iter().sum::<f64>() / r.len() as f64);
    }
    Ok(PolicyEval {
        queries: queries.len(),
        mean_reward,
    })
}

/// Per-query judgement by ground-truth reward, ties within `delta`.
pub fn compare_rewards(candidate: &[f64], baseline: &[f64], delta: f64, baseline_name: &str) -> Comparison {
    let mut c = Comparison {
        baseline: baseline_name.to_string(),
        tie_delta: delta,
        wins: 0,
        ties: 0,
        losses: 0,
    };
    for (a, b) in candidate.iter().zip(baseline) {
        let d = a - b;
        if d.abs() <= delta {
            c.ties += 1;
        } else if d > 0.0 {
            c.wins += 1;
        } else {
            c.losses += 1;
        }
    }
    c
}

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{ModelKind, ParameterStore};
use crate::model::transformer::Evaluator;
use crate::model::vocab::{self, TokenId, TokenSequence, Vocab};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DecodeStrategy {
    Greedy,
    Temperature { t: f64 },
    TopK { k: usize, t: f64 },
}

impl DecodeStrategy {
    pub fn label(&self) -> String {
        match self {
            DecodeStrategy::Greedy => "greedy".into(),
            DecodeStrategy::Temperature { t } => format!("temperature({t})"),
            DecodeStrategy::TopK { k, t } => format!("top-k({k},{t})"),
        }
    }
}

/// Candidate ids at a decoding step: content tokens, plus EOS once at least
/// one token has been produced. Other special ids are never emitted.
fn candidates(vocab: &Vocab, allow_eos: bool) -> Vec<TokenId> {
    let mut c: Vec<TokenId> = Vec::with_capacity(vocab.size);
    if allow_eos {
        c.push(Vocab::EOS);
    }
    c.extend(vocab.content_ids());
    c
}

/// Highest-scoring candidate; ties go to the smallest id.
fn argmax(logp: &[f64], cands: &[TokenId]) -> TokenId {
    let mut best = cands[0];
    for &c in &cands[1..] {
        let (s, b) = (logp[c as usize], logp[best as usize]);
        if s > b || (s == b && c < best) {
            best = c;
        }
    }
    best
}

fn sample_tempered(logp: &[f64], cands: &[TokenId], t: f64, rng: &mut seed::Rng) -> TokenId {
    let mx = cands
        .iter()
        .map(|&c| logp[c as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cands.iter().map(|&c| ((logp[c as usize] - mx) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&c, &w) in cands.iter().zip(&weights) {
        if u < w {
            return c;
        }
        u -= w;
    }
    // floating-point remainder: fall back to the most likely candidate
    argmax(logp, cands)
}

fn top_k(logp: &[f64], cands: &[TokenId], k: usize) -> Vec<TokenId> {
    let mut sorted = cands.to_vec();
    sorted.sort_by(|&a, &b| logp[b as usize].total_cmp(&logp[a as usize]).then(a.cmp(&b)));
    sorted.truncate(k.max(1));
    sorted
}

/// Autoregressive decode from `store` after query `x`. Stops at EOS or after
/// `max_len` tokens (also bounded by the model's context length). The
/// result is never empty: EOS is not a candidate for the first token.
pub fn sample(
    store: &ParameterStore,
    x: &TokenSequence,
    strategy: DecodeStrategy,
    max_len: usize,
    seed_value: u64,
) -> Result<TokenSequence> {
    let mut eval = Evaluator::new(store)?;
    sample_with(&mut eval, x, strategy, max_len, seed_value)
}

/// Same as [`sample`], reusing an existing evaluator.
pub fn sample_with(
    eval: &mut Evaluator,
    x: &TokenSequence,
    strategy: DecodeStrategy,
    max_len: usize,
    seed_value: u64,
) -> Result<TokenSequence> {
    if eval.model().kind() != ModelKind::Policy {
        return Err(Error::ModelMismatch(format!(
            "decoding needs a policy model, got {}",
            eval.model().kind()
        )));
    }
    if max_len == 0 {
        return Err(Error::config("max_len", "must be at least 1"));
    }
    match strategy {
        DecodeStrategy::Temperature { t } | DecodeStrategy::TopK { t, .. } if !(t > 0.0) => {
            return Err(Error::config("temperature", "must be positive"));
        }
        _ => {}
    }
    let vocab = eval.model().vocab();
    let mut prefix = vocab::prompt_input(x);
    // the reward layout appends EOS, so leave room for it
    let capacity = eval.model().config().max_len.saturating_sub(prefix.len() + 1);
    if capacity == 0 {
        return Err(Error::Overlong {
            len: prefix.len() + 2,
            max: eval.model().config().max_len,
        });
    }
    let limit = max_len.min(capacity);
    let mut rng = seed::rng(seed_value);
    let mut out: Vec<TokenId> = Vec::with_capacity(limit);
    while out.len() < limit {
        let logp = eval.next_token_logprobs(&prefix)?;
        let cands = candidates(&vocab, !out.is_empty());
        let next = match strategy {
            DecodeStrategy::Greedy => argmax(&logp, &cands),
            DecodeStrategy::Temperature { t } => sample_tempered(&logp, &cands, t, &mut rng),
            DecodeStrategy::TopK { k, t } => {
                let kept = top_k(&logp, &cands, k);
                sample_tempered(&logp, &kept, t, &mut rng)
            }
        };
        if next == Vocab::EOS {
            break;
        }
        out.push(next);
        prefix.ids.push(next as usize);
        prefix.segments.push(1);
    }
    TokenSequence::response(out, &vocab)
}

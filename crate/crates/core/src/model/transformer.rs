//! Causal transformer backbone and its three heads.
//!
//! All heads share the same architecture: token, position and segment
//! embeddings followed by pre-norm blocks with causal multi-head attention
//! and a GELU MLP. The policy head projects every position onto the
//! vocabulary; the reward and difference heads apply a linear map to the
//! final position's hidden state.

use std::collections::BTreeMap;

use crate::autodiff::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::model::params::{BackboneConfig, ModelKind, ParameterStore};
use crate::model::vocab::{self, ModelInput, TokenSequence, Vocab};

const LN_EPS: f64 = 1e-5;

struct LayerVars {
    ln1: (Var, Var),
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// A [`ParameterStore`] placed on a tape.
pub struct BoundModel {
    kind: ModelKind,
    config: BackboneConfig,
    vocab: Vocab,
    bindings: Vec<(String, Var)>,
    tok: Var,
    pos: Var,
    seg: Var,
    layers: Vec<LayerVars>,
    ln_f: (Var, Var),
    head: (Var, Var),
}

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Array>;

impl BoundModel {
    /// Places every parameter on `tape`, as trainable leaves when `trainable`
    /// is set and as constants otherwise.
    pub fn bind(tape: &mut Tape, store: &ParameterStore, trainable: bool) -> Result<Self> {
        let mut bindings = Vec::new();
        let mut lookup = BTreeMap::new();
        for (name, value) in store.iter() {
            let v = if trainable {
                tape.param(value.clone())
            } else {
                tape.constant(value.clone())
            };
            bindings.push((name.to_string(), v));
            lookup.insert(name.to_string(), v);
        }
        let get = |name: &str| -> Result<Var> {
            lookup
                .get(name)
                .copied()
                .ok_or_else(|| Error::MissingParameter(name.to_string()))
        };
        let cfg = *store.config();
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| get(&format!("layers.{l}.{s}"));
            layers.push(LayerVars {
                ln1: (p("ln1.gain")?, p("ln1.bias")?),
                wq: p("attn.wq")?,
                wk: p("attn.wk")?,
                wv: p("attn.wv")?,
                wo: p("attn.wo")?,
                ln2: (p("ln2.gain")?, p("ln2.bias")?),
                w1: p("mlp.w1")?,
                b1: p("mlp.b1")?,
                w2: p("mlp.w2")?,
                b2: p("mlp.b2")?,
            });
        }
        let head = match store.kind() {
            ModelKind::Policy => (get("lm_head.weight")?, get("lm_head.bias")?),
            _ => (get("score_head.weight")?, get("score_head.bias")?),
        };
        Ok(Self {
            kind: store.kind(),
            config: cfg,
            vocab: store.vocab(),
            tok: get("tok_emb")?,
            pos: get("pos_emb")?,
            seg: get("seg_emb")?,
            layers,
            ln_f: (get("ln_f.gain")?, get("ln_f.bias")?),
            head,
            bindings,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Parameter name and tape handle, in store order.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    /// Gradient for every parameter, zeros where the root does not depend on it.
    pub fn param_grads(&self, tape: &Tape, grads: &Gradients) -> ParamGrads {
        self.bindings
            .iter()
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(tape, *v)))
            .collect()
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::ModelMismatch(format!(
                "{kind} head requested from a {} model",
                self.kind
            )));
        }
        Ok(())
    }

    fn check_len(&self, input: &ModelInput) -> Result<()> {
        if input.len() > self.config.max_len {
            return Err(Error::Overlong {
                len: input.len(),
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn norm(&self, tape: &mut Tape, x: Var, (gain, bias): (Var, Var)) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let n = tape.mul_row(n, gain)?;
        tape.add_row(n, bias)
    }

    /// Final hidden states for rows `from..len` of the input, shape
    /// `[len - from, width]`. Earlier rows are still computed where attention
    /// needs them as keys and values.
    pub fn hidden(&self, tape: &mut Tape, input: &ModelInput, from: usize) -> Result<Var> {
        self.check_len(input)?;
        let len = input.len();
        if len == 0 || from >= len {
            return Err(Error::InvalidSequence(format!(
                "readout row {from} outside input of length {len}"
            )));
        }
        let positions: Vec<usize> = (0..len).collect();
        let t = tape.gather_rows(self.tok, &input.ids)?;
        let p = tape.gather_rows(self.pos, &positions)?;
        let s = tape.gather_rows(self.seg, &input.segments)?;
        let h = tape.add(t, p)?;
        let mut h = tape.add(h, s)?;

        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let last = self.layers.len() - 1;

        for (l, layer) in self.layers.iter().enumerate() {
            // The final layer only produces the rows that are read out.
            let start = if l == last { from } else { 0 };
            let rows = len - start;

            let a = self.norm(tape, h, layer.ln1)?;
            let k = tape.matmul(a, layer.wk)?;
            let v = tape.matmul(a, layer.wv)?;
            let a_q = if start > 0 { tape.slice_rows(a, start, rows)? } else { a };
            let q = tape.matmul(a_q, layer.wq)?;

            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale);
                let probs = tape.softmax_rows(scores, Some(start))?;
                outs.push(tape.matmul(probs, vh)?);
            }
            let attn = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
            let attn = tape.matmul(attn, layer.wo)?;

            let resid = if start > 0 { tape.slice_rows(h, start, rows)? } else { h };
            let h1 = tape.add(resid, attn)?;

            let m = self.norm(tape, h1, layer.ln2)?;
            let m = tape.matmul(m, layer.w1)?;
            let m = tape.add_row(m, layer.b1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, layer.w2)?;
            let m = tape.add_row(m, layer.b2)?;
            h = tape.add(h1, m)?;
        }
        self.norm(tape, h, self.ln_f)
    }

    /// Scalar head applied to the last position.
    fn score_last(&self, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
        let h = self.hidden(tape, input, input.len() - 1)?;
        let s = tape.matmul(h, self.head.0)?;
        let s = tape.reshape(s, &[1])?;
        tape.add(s, self.head.1)
    }

    /// Log-probabilities of each response token (and optionally a final EOS)
    /// given the query, as a vector node.
    pub fn response_logprobs(
        &self,
        tape: &mut Tape,
        x: &TokenSequence,
        y: &TokenSequence,
        include_eos: bool,
    ) -> Result<Var> {
        self.expect(ModelKind::Policy)?;
        let input = vocab::policy_input(x, y);
        let first = x.len() + 1;
        let h = self.hidden(tape, &input, first)?;
        let mut targets: Vec<usize> = y.ids().iter().map(|&t| t as usize).collect();
        let h = if include_eos {
            targets.push(Vocab::EOS as usize);
            h
        } else {
            tape.slice_rows(h, 0, y.len())?
        };
        let logits = tape.matmul(h, self.head.0)?;
        let logits = tape.add_row(logits, self.head.1)?;
        let logp = tape.log_softmax_rows(logits)?;
        tape.pick(logp, &targets)
    }

    /// `sum_t log pi(y_t | x, y_<t)`, divided by `|y|` when `normalize` is set.
    pub fn policy_logprob(&self, tape: &mut Tape, x: &TokenSequence, y: &TokenSequence, normalize: bool) -> Result<Var> {
        let lp = self.response_logprobs(tape, x, y, false)?;
        let total = tape.sum(lp);
        Ok(if normalize {
            tape.scale(total, 1.0 / y.len() as f64)
        } else {
            total
        })
    }

    /// Next-token log-probabilities after `prefix`, as a `[1, vocab]` node.
    pub fn next_token_logprobs(&self, tape: &mut Tape, prefix: &ModelInput) -> Result<Var> {
        self.expect(ModelKind::Policy)?;
        let h = self.hidden(tape, prefix, prefix.len() - 1)?;
        let logits = tape.matmul(h, self.head.0)?;
        let logits = tape.add_row(logits, self.head.1)?;
        tape.log_softmax_rows(logits)
    }

    /// Pointwise reward `r(x, y)`.
    pub fn reward_score(&self, tape: &mut Tape, x: &TokenSequence, y: &TokenSequence) -> Result<Var> {
        self.expect(ModelKind::Reward)?;
        self.score_last(tape, &vocab::reward_input(x, y))
    }

    /// Pairwise score `f(x, y1, y2)`: positive when `y1` is preferred.
    pub fn difference_score(
        &self,
        tape: &mut Tape,
        x: &TokenSequence,
        y1: &TokenSequence,
        y2: &TokenSequence,
    ) -> Result<Var> {
        self.expect(ModelKind::Difference)?;
        self.score_last(tape, &vocab::pairwise_input(x, y1, y2))
    }
}

/// Read-only evaluation of one model. Parameters are bound once as
/// constants; each query runs on the same tape and is dropped afterwards.
pub struct Evaluator {
    tape: Tape,
    model: BoundModel,
    mark: usize,
}

impl Evaluator {
    pub fn new(store: &ParameterStore) -> Result<Self> {
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, store, false)?;
        let mark = tape.len();
        Ok(Self { tape, model, mark })
    }

    pub fn model(&self) -> &BoundModel {
        &self.model
    }

    fn run<T>(&mut self, f: impl FnOnce(&BoundModel, &mut Tape) -> Result<T>) -> Result<T> {
        let out = f(&self.model, &mut self.tape);
        self.tape.truncate(self.mark);
        out
    }

    pub fn reward(&mut self, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
        self.run(|m, t| {
            let v = m.reward_score(t, x, y)?;
            Ok(t.scalar(v))
        })
    }

    pub fn difference(&mut self, x: &TokenSequence, y1: &TokenSequence, y2: &TokenSequence) -> Result<f64> {
        self.run(|m, t| {
            let v = m.difference_score(t, x, y1, y2)?;
            Ok(t.scalar(v))
        })
    }

    pub fn logprob(&mut self, x: &TokenSequence, y: &TokenSequence, normalize: bool) -> Result<f64> {
        self.run(|m, t| {
            let v = m.policy_logprob(t, x, y, normalize)?;
            Ok(t.scalar(v))
        })
    }

    pub fn next_token_logprobs(&mut self, prefix: &ModelInput) -> Result<Vec<f64>> {
        self.run(|m, t| {
            let v = m.next_token_logprobs(t, prefix)?;
            Ok(t.value(v).data().to_vec())
        })
    }
}

/// Value of `r(x, y)`.
pub fn reward_value(store: &ParameterStore, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
    Evaluator::new(store)?.reward(x, y)
}

/// Value of `f(x, y1, y2)`.
pub fn difference_value(store: &ParameterStore, x: &TokenSequence, y1: &TokenSequence, y2: &TokenSequence) -> Result<f64> {
    Evaluator::new(store)?.difference(x, y1, y2)
}

/// Value of `log pi(y | x)`.
pub fn logprob_value(store: &ParameterStore, x: &TokenSequence, y: &TokenSequence, normalize: bool) -> Result<f64> {
    Evaluator::new(store)?.logprob(x, y, normalize)
}

//! Objectives for the pointwise reward model and the pairwise difference
//! model.
//!
//! Each loss comes in two layers. The `*_on_scores` functions take score
//! nodes that are already on the tape and only apply the formula; the
//! model-level functions compute those scores from a [`BoundModel`] first.
//! All batch reductions are means over pairs.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, TokenSequence};
use crate::seed::Rng;

/// How a pair's label was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// Sign of the ground-truth gap.
    Clean,
    /// Sampled from a Bradley-Terry model of the ground-truth gap.
    Bt,
}

/// One comparison: `y_w` is labelled better than `y_l` for `query`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub query: TokenSequence,
    pub y_w: TokenSequence,
    pub y_l: TokenSequence,
    pub source: LabelSource,
}

impl PreferencePair {
    pub fn new(query: TokenSequence, y_w: TokenSequence, y_l: TokenSequence, source: LabelSource) -> Result<Self> {
        if y_w == y_l {
            return Err(Error::InvalidSequence(
                "winner and loser are the same token sequence".into(),
            ));
        }
        Ok(Self {
            query,
            y_w,
            y_l,
            source,
        })
    }
}

/// A loss value with its named parts, as written to training logs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossBundle {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

/// A loss still on the tape: the node to differentiate plus its parts.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub components: Vec<(&'static str, Var)>,
}

impl LossGraph {
    pub fn single(name: &'static str, v: Var) -> Self {
        Self {
            total: v,
            components: vec![(name, v)],
        }
    }

    pub fn bundle(&self, tape: &Tape) -> LossBundle {
        LossBundle {
            total: tape.scalar(self.total),
            components: self
                .components
                .iter()
                .map(|(n, v)| (n.to_string(), tape.scalar(*v)))
                .collect(),
        }
    }
}

fn nonempty<T>(op: &'static str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::EmptyBatch { op });
    }
    Ok(())
}

/// `-(1/N) sum log sigmoid(m_i)` over margin nodes.
pub fn logistic_mean(tape: &mut Tape, margins: &[Var]) -> Result<Var> {
    nonempty("logistic_mean", margins)?;
    let m = tape.stack_scalars(margins)?;
    let ls = tape.log_sigmoid(m);
    let mean = tape.mean(ls);
    Ok(tape.neg(mean))
}

/// `(1/N) sum x_i^2`.
pub fn square_mean(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    nonempty("square_mean", xs)?;
    let v = tape.stack_scalars(xs)?;
    let sq = tape.square(v);
    Ok(tape.mean(sq))
}

/// Bradley-Terry loss from reward nodes of winners and losers.
pub fn bt_loss_on_scores(tape: &mut Tape, r_w: &[Var], r_l: &[Var]) -> Result<LossGraph> {
    nonempty("bt_reward_loss", r_w)?;
    if r_w.len() != r_l.len() {
        return Err(Error::Shape {
            op: "bt_reward_loss",
            shapes: format!("{} winners vs {} losers", r_w.len(), r_l.len()),
        });
    }
    let margins = r_w
        .iter()
        .zip(r_l)
        .map(|(&w, &l)| tape.sub(w, l))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossGraph::single("main", logistic_mean(tape, &margins)?))
}

/// `-(1/N) sum log sigmoid(r(x, y_w) - r(x, y_l))`.
pub fn bt_reward_loss(tape: &mut Tape, model: &BoundModel, batch: &[PreferencePair]) -> Result<LossGraph> {
    nonempty("bt_reward_loss", batch)?;
    let mut r_w = Vec::with_capacity(batch.len());
    let mut r_l = Vec::with_capacity(batch.len());
    for p in batch {
        r_w.push(model.reward_score(tape, &p.query, &p.y_w)?);
        r_l.push(model.reward_score(tape, &p.query, &p.y_l)?);
    }
    bt_loss_on_scores(tape, &r_w, &r_l)
}

/// Weights of the difference-model objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffTrainConfig {
    /// Weight of the duplication regularizer.
    pub beta0: f64,
    /// Weight of the reverse regularizer.
    pub beta1: f64,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        Self {
            beta0: 0.01,
            beta1: 0.01,
        }
    }
}

impl DiffTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 >= 0.0) || !self.beta0.is_finite() {
            return Err(Error::config("beta0", "must be a finite nonnegative number"));
        }
        if !(self.beta1 >= 0.0) || !self.beta1.is_finite() {
            return Err(Error::config("beta1", "must be a finite nonnegative number"));
        }
        Ok(())
    }
}

/// Random choices made for one pair in one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairDraw {
    /// Present the pair as `(y_l, y_w)` with indicator `-1`.
    pub flip: bool,
    /// Use `y_w` (rather than `y_l`) for the self-comparison.
    pub dup_winner: bool,
}

impl PairDraw {
    pub fn draw(rng: &mut Rng) -> Self {
        Self {
            flip: rng.random::<bool>(),
            dup_winner: rng.random::<bool>(),
        }
    }

    pub fn indicator(self) -> f64 {
        if self.flip {
            -1.0
        } else {
            1.0
        }
    }

    fn ordered(self, p: &PreferencePair) -> (&TokenSequence, &TokenSequence) {
        if self.flip {
            (&p.y_l, &p.y_w)
        } else {
            (&p.y_w, &p.y_l)
        }
    }

    fn dup(self, p: &PreferencePair) -> &TokenSequence {
        if self.dup_winner {
            &p.y_w
        } else {
            &p.y_l
        }
    }
}

/// `-(1/N) sum log sigmoid(I_i * f_i)`.
pub fn diff_main_on_scores(tape: &mut Tape, scores: &[Var], indicators: &[f64]) -> Result<Var> {
    nonempty("diff_main_loss", scores)?;
    let margins: Vec<Var> = scores
        .iter()
        .zip(indicators)
        .map(|(&f, &i)| if i == 1.0 { f } else { tape.scale(f, i) })
        .collect();
    logistic_mean(tape, &margins)
}

/// `(1/N) sum f(x, y_i, y_i)^2`.
pub fn diff_dup_on_scores(tape: &mut Tape, self_scores: &[Var]) -> Result<Var> {
    nonempty("diff_dup_loss", self_scores)?;
    square_mean(tape, self_scores)
}

/// `(1/N) sum (f(x, y_i, y_j) + f(x, y_j, y_i))^2`.
pub fn diff_rev_on_scores(tape: &mut Tape, forward: &[Var], reverse: &[Var]) -> Result<Var> {
    nonempty("diff_rev_loss", forward)?;
    let sums = forward
        .iter()
        .zip(reverse)
        .map(|(&a, &b)| tape.add(a, b))
        .collect::<Result<Vec<_>>>()?;
    square_mean(tape, &sums)
}

/// `main + beta0 * dup + beta1 * rev`, recording every part.
pub fn diff_total_on_parts(tape: &mut Tape, main: Var, dup: Option<Var>, rev: Option<Var>, cfg: &DiffTrainConfig) -> Result<LossGraph> {
    let mut total = main;
    let mut components = vec![("main", main)];
    if let Some(d) = dup {
        let w = tape.scale(d, cfg.beta0);
        total = tape.add(total, w)?;
        components.push(("dup", d));
    }
    if let Some(r) = rev {
        let w = tape.scale(r, cfg.beta1);
        total = tape.add(total, w)?;
        components.push(("rev", r));
    }
    Ok(LossGraph { total, components })
}

fn check_draws(batch: &[PreferencePair], draws: &[PairDraw]) -> Result<()> {
    if batch.len() != draws.len() {
        return Err(Error::Shape {
            op: "difference loss",
            shapes: format!("{} pairs vs {} draws", batch.len(), draws.len()),
        });
    }
    Ok(())
}

fn main_scores(tape: &mut Tape, model: &BoundModel, batch: &[PreferencePair], draws: &[PairDraw]) -> Result<Vec<Var>> {
    batch
        .iter()
        .zip(draws)
        .map(|(p, d)| {
            let (a, b) = d.ordered(p);
            model.difference_score(tape, &p.query, a, b)
        })
        .collect()
}

fn reverse_scores(tape: &mut Tape, model: &BoundModel, batch: &[PreferencePair], draws: &[PairDraw]) -> Result<Vec<Var>> {
    batch
        .iter()
        .zip(draws)
        .map(|(p, d)| {
            let (a, b) = d.ordered(p);
            model.difference_score(tape, &p.query, b, a)
        })
        .collect()
}

fn self_scores(tape: &mut Tape, model: &BoundModel, batch: &[PreferencePair], draws: &[PairDraw]) -> Result<Vec<Var>> {
    batch
        .iter()
        .zip(draws)
        .map(|(p, d)| {
            let y = d.dup(p);
            model.difference_score(tape, &p.query, y, y)
        })
        .collect()
}

/// Logistic loss of the difference model, each pair in its drawn orientation.
pub fn diff_main_loss(tape: &mut Tape, model: &BoundModel, batch: &[PreferencePair], draws: &[PairDraw]) -> Result<LossGraph> {
    nonempty("diff_main_loss", batch)?;
    check_draws(batch, draws)?;
    let f = main_scores(tape, model, batch, draws)?;
    let ind: Vec<f64> = draws.iter().map(|d| d.indicator()).collect();
    Ok(LossGraph::single("main", diff_main_on_scores(tape, &f, &ind)?))
}

/// Duplication regularizer on one drawn response per pair.
pub fn diff_dup_loss(tape: &mut Tape, model: &BoundModel, batch: &[PreferencePair], draws: &[PairDraw]) -> Result<LossGraph> {
    nonempty("diff_dup_loss", batch)?;
    check_draws(batch, draws)?;
    let s = self_scores(tape, model, batch, draws)?;
    Ok(LossGraph::single("dup", diff_dup_on_scores(tape, &s)?))
}

/// Reverse regularizer; both orders are scored for every pair.
pub fn diff_rev_loss(tape: &mut Tape, model: &BoundModel, batch: &[PreferencePair], draws: &[PairDraw]) -> Result<LossGraph> {
    nonempty("diff_rev_loss", batch)?;
    check_draws(batch, draws)?;
    let f = main_scores(tape, model, batch, draws)?;
    let r = reverse_scores(tape, model, batch, draws)?;
    Ok(LossGraph::single("rev", diff_rev_on_scores(tape, &f, &r)?))
}

/// Full difference-model objective. The main-orientation scores are shared
/// between the logistic term and the reverse regularizer. A regularizer
/// whose weight is zero is not evaluated and does not appear in the bundle.
pub fn diff_total_loss(
    tape: &mut Tape,
    model: &BoundModel,
    batch: &[PreferencePair],
    draws: &[PairDraw],
    cfg: &DiffTrainConfig,
) -> Result<LossGraph> {
    nonempty("diff_total_loss", batch)?;
    check_draws(batch, draws)?;
    let f = main_scores(tape, model, batch, draws)?;
    let ind: Vec<f64> = draws.iter().map(|d| d.indicator()).collect();
    let main = diff_main_on_scores(tape, &f, &ind)?;
    let dup = if cfg.beta0 > 0.0 {
        let s = self_scores(tape, model, batch, draws)?;
        Some(diff_dup_on_scores(tape, &s)?)
    } else {
        None
    };
    let rev = if cfg.beta1 > 0.0 {
        let r = reverse_scores(tape, model, batch, draws)?;
        Some(diff_rev_on_scores(tape, &f, &r)?)
    } else {
        None
    };
    diff_total_on_parts(tape, main, dup, rev, cfg)
}

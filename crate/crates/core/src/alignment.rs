//! Offline alignment losses: SFT, RRHF, DPO and KTO, each optionally
//! weighted per pair by a reward-difference coefficient.
//!
//! Every loss is a mean over pairs (or over points for KTO). Coefficients
//! and reference log-probabilities enter the graph as constants, so no
//! gradient reaches the scoring model or the reference policy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::datagen::AnnotatedPair;
use crate::error::{Error, Result};
use crate::model::{BoundModel, Evaluator, ModelKind, ParamGrads, ParameterStore, TokenSequence};
use crate::scoring::LossGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rrhf,
    Dpo,
    Kto,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rrhf => "rrhf",
            Method::Dpo => "dpo",
            Method::Kto => "kto",
        }
    }
}

/// Direction of the RRHF ranking hinge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HingeMode {
    /// `-max(p_w - p_l, 0)`: rewards a positive margin, flat on misordered pairs.
    Paper,
    /// `max(0, p_l - p_w)`: penalises misordered pairs.
    Original,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub method: Method,
    /// Multiply each pair's loss by its coefficient (the `+rc` variants).
    pub use_coefficients: bool,
    pub dpo_beta: f64,
    pub rrhf_hinge_mode: HingeMode,
    pub rrhf_sft_weight: f64,
    pub length_normalize_rrhf: bool,
    pub kto_beta: f64,
    pub kto_lambda_desirable: f64,
    pub kto_lambda_undesirable: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            method: Method::Dpo,
            use_coefficients: false,
            dpo_beta: 0.2,
            rrhf_hinge_mode: HingeMode::Original,
            rrhf_sft_weight: 1.0,
            length_normalize_rrhf: true,
            kto_beta: 0.1,
            kto_lambda_desirable: 1.0,
            kto_lambda_undesirable: 1.0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, "must be a positive number"))
            }
        };
        positive("dpo_beta", self.dpo_beta)?;
        positive("kto_beta", self.kto_beta)?;
        positive("kto_lambda_desirable", self.kto_lambda_desirable)?;
        positive("kto_lambda_undesirable", self.kto_lambda_undesirable)?;
        if !(self.rrhf_sft_weight >= 0.0) || !self.rrhf_sft_weight.is_finite() {
            return Err(Error::config("rrhf_sft_weight", "must be a finite nonnegative number"));
        }
        Ok(())
    }

    /// `dpo`, `dpo+rc`, ...
    pub fn label(&self) -> String {
        if self.use_coefficients {
            format!("{}+rc", self.method.name())
        } else {
            self.method.name().to_string()
        }
    }
}

/// Frozen SFT policy. Log-probabilities are computed once per
/// `(query, response)` and cached.
pub struct ReferenceSnapshot {
    store: ParameterStore,
    eval: Evaluator,
    cache: HashMap<(Vec<u32>, Vec<u32>), f64>,
}

impl ReferenceSnapshot {
    pub fn new(store: ParameterStore) -> Result<Self> {
        store.expect_kind(ModelKind::Policy)?;
        let eval = Evaluator::new(&store)?;
        Ok(Self {
            store,
            eval,
            cache: HashMap::new(),
        })
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    /// Unnormalised `log pi_ref(y | x)`.
    pub fn logprob(&mut self, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
        let key = (x.ids().to_vec(), y.ids().to_vec());
        if let Some(&v) = self.cache.get(&key) {
            return Ok(v);
        }
        let v = self.eval.logprob(x, y, false)?;
        self.cache.insert(key, v);
        Ok(v)
    }

    /// Fills the cache for every response in `pairs`.
    pub fn precompute(&mut self, pairs: &[AnnotatedPair]) -> Result<()> {
        for p in pairs {
            self.logprob(&p.pair.query, &p.pair.y_w)?;
            self.logprob(&p.pair.query, &p.pair.y_l)?;
        }
        Ok(())
    }

    /// [`precompute`](Self::precompute) spread over threads.
    pub fn precompute_parallel(&mut self, pairs: &[AnnotatedPair]) -> Result<()> {
        let mut todo: Vec<(&TokenSequence, &TokenSequence)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for p in pairs {
            for y in [&p.pair.y_w, &p.pair.y_l] {
                let key = (p.pair.query.ids().to_vec(), y.ids().to_vec());
                if !self.cache.contains_key(&key) && seen.insert(key) {
                    todo.push((&p.pair.query, y));
                }
            }
        }
        let store = &self.store;
        let values = crate::parallel::par_map(&todo, || Evaluator::new(store), |ev, _, (x, y)| ev.logprob(x, y, false))?;
        for ((x, y), v) in todo.iter().zip(values) {
            self.cache.insert((x.ids().to_vec(), y.ids().to_vec()), v);
        }
        Ok(())
    }

    fn check(&self, policy: &BoundModel) -> Result<()> {
        if policy.vocab() != self.store.vocab() || policy.config() != self.store.config() {
            return Err(Error::ModelMismatch(format!(
                "policy (vocab {}, {:?}) vs reference (vocab {}, {:?})",
                policy.vocab().size,
                policy.config(),
                self.store.vocab().size,
                self.store.config()
            )));
        }
        Ok(())
    }
}

fn nonempty<T>(op: &'static str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::EmptyBatch { op });
    }
    Ok(())
}

/// Multiplies a per-pair vector by the coefficients when `+rc` is on.
fn weight(tape: &mut Tape, v: Var, batch: &[AnnotatedPair], cfg: &AlignConfig) -> Result<Var> {
    if !cfg.use_coefficients {
        return Ok(v);
    }
    let c = tape.constant(Array::vector(batch.iter().map(|p| p.coefficient).collect()));
    tape.mul(v, c)
}

/// Mean token-level negative log-likelihood of each response given its
/// query, counting the closing EOS as a token.
pub fn sft_loss(tape: &mut Tape, model: &BoundModel, batch: &[(&TokenSequence, &TokenSequence)]) -> Result<LossGraph> {
    nonempty("sft_loss", batch)?;
    let parts = batch
        .iter()
        .map(|(x, y)| model.response_logprobs(tape, x, y, true))
        .collect::<Result<Vec<_>>>()?;
    let all = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let m = tape.mean(all);
    Ok(LossGraph::single("sft", tape.neg(m)))
}

/// Ranking term on already-computed (length-normalised) log-prob nodes.
pub fn rrhf_ranking_on_logprobs(
    tape: &mut Tape,
    p_w: &[Var],
    p_l: &[Var],
    batch: &[AnnotatedPair],
    cfg: &AlignConfig,
) -> Result<Var> {
    nonempty("rrhf_loss", p_w)?;
    let pw = tape.stack_scalars(p_w)?;
    let pl = tape.stack_scalars(p_l)?;
    let hinge = match cfg.rrhf_hinge_mode {
        HingeMode::Original => {
            let d = tape.sub(pl, pw)?;
            tape.max_const(d, 0.0)
        }
        HingeMode::Paper => {
            let d = tape.sub(pw, pl)?;
            let h = tape.max_const(d, 0.0);
            tape.neg(h)
        }
    };
    let weighted = weight(tape, hinge, batch, cfg)?;
    Ok(tape.mean(weighted))
}

/// RRHF ranking hinge plus weighted SFT on the winners.
pub fn rrhf_loss(tape: &mut Tape, model: &BoundModel, batch: &[AnnotatedPair], cfg: &AlignConfig) -> Result<LossGraph> {
    nonempty("rrhf_loss", batch)?;
    let norm = cfg.length_normalize_rrhf;
    let mut p_w = Vec::with_capacity(batch.len());
    let mut p_l = Vec::with_capacity(batch.len());
    for p in batch {
        p_w.push(model.policy_logprob(tape, &p.pair.query, &p.pair.y_w, norm)?);
        p_l.push(model.policy_logprob(tape, &p.pair.query, &p.pair.y_l, norm)?);
    }
    let ranking = rrhf_ranking_on_logprobs(tape, &p_w, &p_l, batch, cfg)?;
    let mut components = vec![("ranking", ranking)];
    let mut total = ranking;
    if cfg.rrhf_sft_weight > 0.0 {
        let demos: Vec<_> = batch.iter().map(|p| (&p.pair.query, &p.pair.y_w)).collect();
        let sft = sft_loss(tape, model, &demos)?.total;
        let w = tape.scale(sft, cfg.rrhf_sft_weight);
        total = tape.add(total, w)?;
        components.push(("sft", sft));
    }
    Ok(LossGraph { total, components })
}

/// DPO on policy log-prob nodes and constant reference log-probs.
pub fn dpo_on_logprobs(
    tape: &mut Tape,
    pi_w: &[Var],
    pi_l: &[Var],
    ref_w: &[f64],
    ref_l: &[f64],
    batch: &[AnnotatedPair],
    cfg: &AlignConfig,
) -> Result<LossGraph> {
    nonempty("dpo_loss", pi_w)?;
    let pw = tape.stack_scalars(pi_w)?;
    let pl = tape.stack_scalars(pi_l)?;
    let rw = tape.constant(Array::vector(ref_w.to_vec()));
    let rl = tape.constant(Array::vector(ref_l.to_vec()));
    let lw = tape.sub(pw, rw)?;
    let ll = tape.sub(pl, rl)?;
    let d = tape.sub(lw, ll)?;
    let margin = tape.scale(d, cfg.dpo_beta);
    let g = tape.log_sigmoid(margin);
    let g = weight(tape, g, batch, cfg)?;
    let m = tape.mean(g);
    Ok(LossGraph::single("dpo", tape.neg(m)))
}

/// `-(1/N) sum R^alpha log sigmoid(beta (log-ratio_w - log-ratio_l))`.
pub fn dpo_loss(
    tape: &mut Tape,
    model: &BoundModel,
    reference: &mut ReferenceSnapshot,
    batch: &[AnnotatedPair],
    cfg: &AlignConfig,
) -> Result<LossGraph> {
    nonempty("dpo_loss", batch)?;
    reference.check(model)?;
    let mut pi_w = Vec::with_capacity(batch.len());
    let mut pi_l = Vec::with_capacity(batch.len());
    let mut ref_w = Vec::with_capacity(batch.len());
    let mut ref_l = Vec::with_capacity(batch.len());
    for p in batch {
        let (x, w, l) = (&p.pair.query, &p.pair.y_w, &p.pair.y_l);
        pi_w.push(model.policy_logprob(tape, x, w, false)?);
        pi_l.push(model.policy_logprob(tape, x, l, false)?);
        ref_w.push(reference.logprob(x, w)?);
        ref_l.push(reference.logprob(x, l)?);
    }
    dpo_on_logprobs(tape, &pi_w, &pi_l, &ref_w, &ref_l, batch, cfg)
}

/// One KTO point: a response marked desirable or not, with its weight.
#[derive(Clone, Copy, Debug)]
pub struct KtoPoint {
    pub logprob: Var,
    pub ref_logprob: f64,
    pub desirable: bool,
    pub coefficient: f64,
}

/// Reference point `max(0, mean log-ratio)` over all points.
pub fn kto_reference_point(log_ratios: &[f64]) -> f64 {
    let mean = log_ratios.iter().sum::<f64>() / log_ratios.len() as f64;
    mean.max(0.0)
}

/// KTO over points. The reference point is computed from the batch unless
/// `fixed_z` is given. Returns the loss and the reference point used.
pub fn kto_on_points(tape: &mut Tape, points: &[KtoPoint], cfg: &AlignConfig, fixed_z: Option<f64>) -> Result<(LossGraph, f64)> {
    nonempty("kto_loss", points)?;
    let n_des = points.iter().filter(|p| p.desirable).count();
    if n_des == 0 || n_des == points.len() {
        return Err(Error::SingleClassBatch {
            present: if n_des == 0 { "undesirable" } else { "desirable" },
        });
    }
    let ratios: Vec<f64> = points
        .iter()
        .map(|p| tape.scalar(p.logprob) - p.ref_logprob)
        .collect();
    let z = fixed_z.unwrap_or_else(|| kto_reference_point(&ratios));
    let n = points.len() as f64;
    let mut parts: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    let mut weights: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for p in points {
        // rho - z for desirable points, z - rho otherwise
        let shifted = tape.offset(p.logprob, -(p.ref_logprob + z));
        let arg = if p.desirable { shifted } else { tape.neg(shifted) };
        let v = tape.scale(arg, cfg.kto_beta);
        let v = tape.sigmoid(v);
        let one_minus = tape.neg(v);
        let one_minus = tape.offset(one_minus, 1.0);
        let (class, lambda) = if p.desirable {
            (0, cfg.kto_lambda_desirable)
        } else {
            (1, cfg.kto_lambda_undesirable)
        };
        parts[class].push(one_minus);
        let c = if cfg.use_coefficients { p.coefficient } else { 1.0 };
        weights[class].push(lambda * c / n);
    }
    let mut comps = Vec::with_capacity(2);
    for (name, (vars, w)) in ["desirable", "undesirable"].into_iter().zip(parts.iter().zip(&weights)) {
        let v = tape.stack_scalars(vars)?;
        let wc = tape.constant(Array::vector(w.clone()));
        let prod = tape.mul(v, wc)?;
        comps.push((name, tape.sum(prod)));
    }
    let total = tape.add(comps[0].1, comps[1].1)?;
    Ok((LossGraph { total, components: comps }, z))
}

/// KTO with winners as desirable and losers as undesirable points; both
/// carry their pair's coefficient.
pub fn kto_loss(
    tape: &mut Tape,
    model: &BoundModel,
    reference: &mut ReferenceSnapshot,
    batch: &[AnnotatedPair],
    cfg: &AlignConfig,
) -> Result<LossGraph> {
    Ok(kto_loss_at(tape, model, reference, batch, cfg, None)?.0)
}

/// [`kto_loss`] with an optional externally fixed reference point, also
/// returning the reference point used.
pub fn kto_loss_at(
    tape: &mut Tape,
    model: &BoundModel,
    reference: &mut ReferenceSnapshot,
    batch: &[AnnotatedPair],
    cfg: &AlignConfig,
    fixed_z: Option<f64>,
) -> Result<(LossGraph, f64)> {
    nonempty("kto_loss", batch)?;
    reference.check(model)?;
    let mut points = Vec::with_capacity(2 * batch.len());
    for p in batch {
        let x = &p.pair.query;
        for (y, desirable) in [(&p.pair.y_w, true), (&p.pair.y_l, false)] {
            points.push(KtoPoint {
                logprob: model.policy_logprob(tape, x, y, false)?,
                ref_logprob: reference.logprob(x, y)?,
                desirable,
                coefficient: p.coefficient,
            });
        }
    }
    kto_on_points(tape, &points, cfg, fixed_z)
}

/// Loss for `cfg.method`.
pub fn alignment_loss(
    tape: &mut Tape,
    model: &BoundModel,
    reference: &mut ReferenceSnapshot,
    batch: &[AnnotatedPair],
    cfg: &AlignConfig,
) -> Result<LossGraph> {
    match cfg.method {
        Method::Rrhf => rrhf_loss(tape, model, batch, cfg),
        Method::Dpo => dpo_loss(tape, model, reference, batch, cfg),
        Method::Kto => kto_loss(tape, model, reference, batch, cfg),
    }
}

fn logprob_grad(store: &ParameterStore, x: &TokenSequence, y: &TokenSequence) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let m = BoundModel::bind(&mut tape, store, true)?;
    let lp = m.policy_logprob(&mut tape, x, y, false)?;
    let g = tape.backward(lp)?;
    Ok((tape.scalar(lp), m.param_grads(&tape, &g)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of assembling the DPO gradient pair by pair.
#[derive(Clone, Debug)]
pub struct GradientIdentity {
    /// Largest elementwise relative deviation from the autodiff gradient.
    pub max_deviation: f64,
    /// `R_hat_i = R^alpha * beta * sigmoid(r_hat_l - r_hat_w)` per pair.
    pub pair_weights: Vec<f64>,
    /// L2 norm of each pair's contribution to the assembled gradient.
    pub pair_norms: Vec<f64>,
    pub assembled: ParamGrads,
    pub autodiff: ParamGrads,
}

/// Elements smaller than this in both gradients are compared absolutely.
const IDENTITY_FLOOR: f64 = 1e-12;

/// Assembles `-(1/N) sum R_hat_i (grad log pi(y_w) - grad log pi(y_l))`
/// from per-response gradients and compares it with the autodiff gradient
/// of [`dpo_loss`] under the same coefficients.
pub fn dpo_rc_gradient_identity_check(
    policy: &ParameterStore,
    reference: &mut ReferenceSnapshot,
    batch: &[AnnotatedPair],
    cfg: &AlignConfig,
) -> Result<GradientIdentity> {
    nonempty("dpo_rc_gradient_identity_check", batch)?;
    let cfg = AlignConfig {
        method: Method::Dpo,
        ..*cfg
    };
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, policy, true)?;
    let loss = dpo_loss(&mut tape, &model, reference, batch, &cfg)?;
    let grads = tape.backward(loss.total)?;
    let autodiff = model.param_grads(&tape, &grads);

    let n = batch.len() as f64;
    let mut assembled: ParamGrads = autodiff
        .iter()
        .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
        .collect();
    let mut pair_weights = Vec::with_capacity(batch.len());
    let mut pair_norms = Vec::with_capacity(batch.len());
    for p in batch {
        let (x, w, l) = (&p.pair.query, &p.pair.y_w, &p.pair.y_l);
        let (lp_w, g_w) = logprob_grad(policy, x, w)?;
        let (lp_l, g_l) = logprob_grad(policy, x, l)?;
        let r_w = cfg.dpo_beta * (lp_w - reference.logprob(x, w)?);
        let r_l = cfg.dpo_beta * (lp_l - reference.logprob(x, l)?);
        let c = if cfg.use_coefficients { p.coefficient } else { 1.0 };
        let r_hat = c * cfg.dpo_beta * sigmoid(r_l - r_w);
        pair_weights.push(r_hat);
        let mut sq = 0.0;
        for (name, acc) in assembled.iter_mut() {
            for ((a, &gw), &gl) in acc.data_mut().iter_mut().zip(g_w[name].data()).zip(g_l[name].data()) {
                let contrib = -r_hat * (gw - gl) / n;
                *a += contrib;
                sq += contrib * contrib;
            }
        }
        pair_norms.push(sq.sqrt());
    }

    let mut max_deviation: f64 = 0.0;
    for (name, a) in &assembled {
        for (&u, &v) in a.data().iter().zip(autodiff[name].data()) {
            let dev = (u - v).abs() / u.abs().max(v.abs()).max(IDENTITY_FLOOR);
            max_deviation = max_deviation.max(dev);
        }
    }
    Ok(GradientIdentity {
        max_deviation,
        pair_weights,
        pair_norms,
        assembled,
        autodiff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kto_reference_point_is_clamped() {
        assert_eq!(kto_reference_point(&[-1.0, -2.0]), 0.0);
        assert_eq!(kto_reference_point(&[1.0, 2.0]), 1.5);
    }

    #[test]
    fn labels() {
        let mut c = AlignConfig::default();
        assert_eq!(c.label(), "dpo");
        c.use_coefficients = true;
        c.method = Method::Kto;
        assert_eq!(c.label(), "kto+rc");
    }

    #[test]
    fn validation() {
        let c = AlignConfig {
            dpo_beta: 0.0,
            ..AlignConfig::default()
        };
        assert!(c.validate().is_err());
        let c = AlignConfig {
            rrhf_sft_weight: -1.0,
            ..AlignConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

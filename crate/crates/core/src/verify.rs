//! Self-checks on small random instances: finite-difference gradients of
//! every loss, the DPO gradient identity, the `alpha = 0` reductions and the
//! regularizer zero sets. Used by the `verify` subcommand and the tests.

use rand::Rng as _;
use serde::Serialize;

use crate::alignment::{
    alignment_loss, dpo_rc_gradient_identity_check, kto_loss_at, sft_loss, AlignConfig, HingeMode, Method, ReferenceSnapshot,
};
use crate::autodiff::{Tape, Var};
use crate::coefficients::{apply_alpha, CoefficientConfig, CoefficientSource};
use crate::datagen::AnnotatedPair;
use crate::error::Result;
use crate::gradcheck::{check_param_gradients, GradCheckReport};
use crate::model::{BackboneConfig, BoundModel, ModelKind, ParameterStore, TokenSequence, Vocab};
use crate::scoring::{
    bt_reward_loss, diff_dup_loss, diff_dup_on_scores, diff_main_loss, diff_rev_loss, diff_rev_on_scores,
    diff_total_loss, DiffTrainConfig, LabelSource, LossGraph, PairDraw, PreferencePair,
};
use crate::seed::{self, Rng};

/// Relative tolerance for finite-difference checks.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Relative tolerance for the DPO gradient identity.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;

pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        width: 8,
        heads: 2,
        max_len: 24,
    }
}

/// Models and pairs for one random check.
pub struct Instance {
    pub policy: ParameterStore,
    pub reference: ParameterStore,
    pub reward: ParameterStore,
    pub difference: ParameterStore,
    pub pairs: Vec<AnnotatedPair>,
    pub draws: Vec<PairDraw>,
}

fn random_seq(rng: &mut Rng, vocab: &Vocab, min: usize, max: usize) -> Vec<u32> {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| rng.random_range(vocab.content_ids()))
        .collect()
}

fn model(kind: ModelKind, seed_value: u64, label: &str) -> Result<ParameterStore> {
    let s = seed::derive(seed_value, label, 0);
    let mut store = ParameterStore::init(kind, Vocab::default(), tiny_config(), s)?;
    // move away from the near-zero initial point so gradients are not tiny
    store.perturb(0.3, s);
    Ok(store)
}

/// Random tiny models and `n_pairs` pairs. Coefficients are
/// `apply_alpha(raw, alpha)` of random raw differences in `(-0.5, 3)`.
pub fn random_instance(seed_value: u64, n_pairs: usize, alpha: f64) -> Result<Instance> {
    let vocab = Vocab::default();
    let mut rng = seed::derived_rng(seed_value, "instance", 0);
    let policy = model(ModelKind::Policy, seed_value, "policy")?;
    let mut reference = policy.clone();
    reference.perturb(0.05, seed::derive(seed_value, "reference", 0));
    let ccfg = CoefficientConfig {
        source: CoefficientSource::RewardModel,
        alpha,
        clamp_epsilon: 1e-2,
    };
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut draws = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let x = TokenSequence::query(random_seq(&mut rng, &vocab, 2, 4), &vocab)?;
        let w = TokenSequence::response(random_seq(&mut rng, &vocab, 1, 4), &vocab)?;
        let l = TokenSequence::response(random_seq(&mut rng, &vocab, 1, 4), &vocab)?;
        if w == l {
            continue;
        }
        let raw: f64 = rng.random_range(-0.5..3.0);
        pairs.push(AnnotatedPair {
            pair: PreferencePair::new(x, w, l, LabelSource::Clean)?,
            gt_gap: 0.0,
            raw_difference: Some(raw),
            coefficient: apply_alpha(raw, &ccfg),
        });
        draws.push(PairDraw::draw(&mut rng));
    }
    Ok(Instance {
        policy,
        reference,
        reward: model(ModelKind::Reward, seed_value, "reward")?,
        difference: model(ModelKind::Difference, seed_value, "difference")?,
        pairs,
        draws,
    })
}

/// Every loss, as `(name, model kind, align config)`.
fn loss_cases() -> Vec<(String, ModelKind, Option<AlignConfig>)> {
    let mut cases = vec![
        ("bt_reward".to_string(), ModelKind::Reward, None),
        ("diff_main".into(), ModelKind::Difference, None),
        ("diff_dup".into(), ModelKind::Difference, None),
        ("diff_rev".into(), ModelKind::Difference, None),
        ("diff_total".into(), ModelKind::Difference, None),
        ("sft".into(), ModelKind::Policy, None),
    ];
    for method in [Method::Rrhf, Method::Dpo, Method::Kto] {
        for rc in [false, true] {
            let cfg = AlignConfig {
                method,
                use_coefficients: rc,
                ..AlignConfig::default()
            };
            cases.push((cfg.label(), ModelKind::Policy, Some(cfg)));
        }
    }
    let paper = AlignConfig {
        method: Method::Rrhf,
        use_coefficients: true,
        rrhf_hinge_mode: HingeMode::Paper,
        ..AlignConfig::default()
    };
    cases.push(("rrhf+rc(paper hinge)".into(), ModelKind::Policy, Some(paper)));
    cases
}

fn build_loss(
    name: &str,
    align: Option<&AlignConfig>,
    tape: &mut Tape,
    m: &BoundModel,
    inst: &Instance,
    reference: &mut ReferenceSnapshot,
) -> Result<LossGraph> {
    let pairs: Vec<PreferencePair> = inst.pairs.iter().map(|p| p.pair.clone()).collect();
    let dcfg = DiffTrainConfig {
        beta0: 0.1,
        beta1: 0.1,
    };
    match (name, align) {
        ("bt_reward", _) => bt_reward_loss(tape, m, &pairs),
        ("diff_main", _) => diff_main_loss(tape, m, &pairs, &inst.draws),
        ("diff_dup", _) => diff_dup_loss(tape, m, &pairs, &inst.draws),
        ("diff_rev", _) => diff_rev_loss(tape, m, &pairs, &inst.draws),
        ("diff_total", _) => diff_total_loss(tape, m, &pairs, &inst.draws, &dcfg),
        ("sft", _) => {
            let demos: Vec<_> = pairs.iter().map(|p| (&p.query, &p.y_w)).collect();
            sft_loss(tape, m, &demos)
        }
        (_, Some(cfg)) => alignment_loss(tape, m, reference, &inst.pairs, cfg),
        _ => unreachable!("every case has a builder"),
    }
}

/// Finite-difference check of every loss, `probes` parameter coordinates each.
pub fn check_loss_gradients(seed_value: u64, probes: usize) -> Result<Vec<(String, GradCheckReport)>> {
    let inst = random_instance(seed_value, 3, 0.5)?;
    let mut out = Vec::new();
    for (name, kind, align) in loss_cases() {
        let store = match kind {
            ModelKind::Policy => &inst.policy,
            ModelKind::Reward => &inst.reward,
            ModelKind::Difference => &inst.difference,
        };
        let mut reference = ReferenceSnapshot::new(inst.reference.clone())?;
        let mut rng = seed::derived_rng(seed_value, &name, 0);
        let report = match align {
            Some(cfg) if cfg.method == Method::Kto => {
                // The reference point is detached by definition, so the
                // numeric side must hold it at its unperturbed value.
                let mut t = Tape::new();
                let m = BoundModel::bind(&mut t, store, false)?;
                let z = kto_loss_at(&mut t, &m, &mut reference, &inst.pairs, &cfg, None)?.1;
                check_param_gradients(store, probes, &mut rng, |t: &mut Tape, m: &BoundModel| {
                    Ok(kto_loss_at(t, m, &mut reference, &inst.pairs, &cfg, Some(z))?.0.total)
                })?
            }
            _ => check_param_gradients(store, probes, &mut rng, |t: &mut Tape, m: &BoundModel| {
                Ok(build_loss(&name, align.as_ref(), t, m, &inst, &mut reference)?.total)
            })?,
        };
        out.push((name, report));
    }
    Ok(out)
}

/// Summary of the gradient identity over many instances.
#[derive(Clone, Debug, Serialize)]
pub struct IdentitySummary {
    pub instances: usize,
    pub max_deviation: f64,
}

/// DPO gradient identity on `instances` random 4-pair instances.
pub fn check_gradient_identity(seed_value: u64, instances: usize, alpha: f64) -> Result<IdentitySummary> {
    let cfg = AlignConfig {
        method: Method::Dpo,
        use_coefficients: true,
        ..AlignConfig::default()
    };
    let mut max_deviation: f64 = 0.0;
    for i in 0..instances {
        let inst = random_instance(seed::derive(seed_value, "identity", i as u64), 4, alpha)?;
        let mut reference = ReferenceSnapshot::new(inst.reference)?;
        let id = dpo_rc_gradient_identity_check(&inst.policy, &mut reference, &inst.pairs, &cfg)?;
        max_deviation = max_deviation.max(id.max_deviation);
    }
    Ok(IdentitySummary {
        instances,
        max_deviation,
    })
}

/// Doubling one pair's coefficient doubles its assembled gradient
/// contribution and leaves the others unchanged. Returns the largest
/// relative departure from that.
pub fn check_coefficient_linearity(seed_value: u64) -> Result<f64> {
    let cfg = AlignConfig {
        method: Method::Dpo,
        use_coefficients: true,
        ..AlignConfig::default()
    };
    let inst = random_instance(seed_value, 4, 0.5)?;
    let mut reference = ReferenceSnapshot::new(inst.reference.clone())?;
    let base = dpo_rc_gradient_identity_check(&inst.policy, &mut reference, &inst.pairs, &cfg)?;
    let mut worst: f64 = 0.0;
    for k in 0..inst.pairs.len() {
        let mut pairs = inst.pairs.clone();
        pairs[k].coefficient *= 2.0;
        let scaled = dpo_rc_gradient_identity_check(&inst.policy, &mut reference, &pairs, &cfg)?;
        for i in 0..pairs.len() {
            let factor = if i == k { 2.0 } else { 1.0 };
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
            worst = worst
                .max(rel(scaled.pair_weights[i], factor * base.pair_weights[i]))
                .max(rel(scaled.pair_norms[i], factor * base.pair_norms[i]));
        }
    }
    Ok(worst)
}

fn bits_of(tape: &Tape, m: &BoundModel, g: &LossGraph) -> Result<Vec<u64>> {
    let grads = tape.backward(g.total)?;
    let mut bits = vec![tape.scalar(g.total).to_bits()];
    for a in m.param_grads(tape, &grads).values() {
        bits.extend(a.data().iter().map(|v| v.to_bits()));
    }
    Ok(bits)
}

/// With `alpha = 0`, each `+rc` loss and its gradient are bitwise equal to
/// the vanilla loss. Returns `(method, equal)` per method.
pub fn check_reductions(seed_value: u64) -> Result<Vec<(String, bool)>> {
    let inst = random_instance(seed_value, 4, 0.0)?;
    let mut out = Vec::new();
    for method in [Method::Rrhf, Method::Dpo, Method::Kto] {
        let mut bits = Vec::new();
        for rc in [false, true] {
            let cfg = AlignConfig {
                method,
                use_coefficients: rc,
                ..AlignConfig::default()
            };
            let mut reference = ReferenceSnapshot::new(inst.reference.clone())?;
            let mut tape = Tape::new();
            let m = BoundModel::bind(&mut tape, &inst.policy, true)?;
            let g = alignment_loss(&mut tape, &m, &mut reference, &inst.pairs, &cfg)?;
            bits.push(bits_of(&tape, &m, &g)?);
        }
        out.push((method.name().to_string(), bits[0] == bits[1]));
    }
    Ok(out)
}

/// Zero sets of the two regularizers, on score constants and on a model
/// whose scalar head is zeroed. Returns `(check, passed)` pairs.
pub fn check_regularizer_semantics(seed_value: u64) -> Result<Vec<(String, bool)>> {
    let mut rng = seed::derived_rng(seed_value, "regularizers", 0);
    let mut out = Vec::new();
    let mut t = Tape::new();
    let consts = |t: &mut Tape, xs: &[f64]| -> Vec<Var> { xs.iter().map(|&x| t.scalar_const(x)).collect() };

    let zeros = consts(&mut t, &[0.0; 5]);
    let v = diff_dup_on_scores(&mut t, &zeros)?;
    out.push(("dup is 0 when self-scores are 0".into(), t.scalar(v) == 0.0));
    let mut one_off = [0.0; 5];
    one_off[rng.random_range(0..5)] = 1e-6;
    let s = consts(&mut t, &one_off);
    let v = diff_dup_on_scores(&mut t, &s)?;
    out.push(("dup is positive when one self-score is nonzero".into(), t.scalar(v) > 0.0));

    let f: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let neg: Vec<f64> = f.iter().map(|v| -v).collect();
    let (a, b) = (consts(&mut t, &f), consts(&mut t, &neg));
    let v = diff_rev_on_scores(&mut t, &a, &b)?;
    out.push(("rev is 0 on antisymmetric scores".into(), t.scalar(v) == 0.0));
    let mut skew = neg.clone();
    skew[rng.random_range(0..5)] += 1e-6;
    let c = consts(&mut t, &skew);
    let v = diff_rev_on_scores(&mut t, &a, &c)?;
    out.push(("rev is positive when one pair is not antisymmetric".into(), t.scalar(v) > 0.0));

    // a difference model with a zero head scores every input 0
    let inst = random_instance(seed_value, 4, 0.5)?;
    let pairs: Vec<PreferencePair> = inst.pairs.iter().map(|p| p.pair.clone()).collect();
    let mut flat = inst.difference.clone();
    for name in ["score_head.weight", "score_head.bias"] {
        flat.get_mut(name)?.data_mut().fill(0.0);
    }
    for (label, store, expect_zero) in [("zero head", &flat, true), ("random head", &inst.difference, false)] {
        let mut tape = Tape::new();
        let m = BoundModel::bind(&mut tape, store, false)?;
        let dup = diff_dup_loss(&mut tape, &m, &pairs, &inst.draws)?.total;
        let rev = diff_rev_loss(&mut tape, &m, &pairs, &inst.draws)?.total;
        let (dup, rev) = (tape.scalar(dup), tape.scalar(rev));
        let ok = if expect_zero {
            dup == 0.0 && rev == 0.0
        } else {
            dup > 0.0 && rev > 0.0
        };
        out.push((format!("model with {label}: dup {dup:.3e}, rev {rev:.3e}"), ok));
    }
    Ok(out)
}

/// One line of a verification report.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Runs every check.
pub fn run_all(seed_value: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, report) in check_loss_gradients(seed_value, 20)? {
        out.push(CheckResult {
            passed: report.passes(FD_TOLERANCE),
            detail: format!("max relative error {:.2e} over {} probes", report.max_rel_error(), report.probes.len()),
            name: format!("gradient {name}"),
        });
    }
    let id = check_gradient_identity(seed_value, 50, 0.5)?;
    out.push(CheckResult {
        name: "dpo+rc gradient identity".into(),
        passed: id.max_deviation < IDENTITY_TOLERANCE,
        detail: format!("max deviation {:.2e} over {} instances", id.max_deviation, id.instances),
    });
    let lin = check_coefficient_linearity(seed_value)?;
    out.push(CheckResult {
        name: "per-pair contribution linear in coefficient".into(),
        passed: lin < 1e-12,
        detail: format!("max relative departure {lin:.2e}"),
    });
    for (method, equal) in check_reductions(seed_value)? {
        out.push(CheckResult {
            name: format!("alpha=0 reduction {method}"),
            passed: equal,
            detail: if equal { "bitwise equal".into() } else { "differs".into() },
        });
    }
    for (name, ok) in check_regularizer_semantics(seed_value)? {
        out.push(CheckResult {
            name: format!("regularizer: {name}"),
            passed: ok,
            detail: String::new(),
        });
    }
    Ok(out)
}

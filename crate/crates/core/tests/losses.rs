use prefdiff_core::alignment::*;
use prefdiff_core::datagen::AnnotatedPair;
use prefdiff_core::model::{BoundModel, ModelKind, ParameterStore, TokenSequence, Vocab};
use prefdiff_core::optim::{Adam, AdamConfig};
use prefdiff_core::verify::{self, random_instance, FD_TOLERANCE, IDENTITY_TOLERANCE};
use prefdiff_core::{Error, Tape, Var};

fn consts(t: &mut Tape, xs: &[f64]) -> Vec<Var> {
    xs.iter().map(|&x| t.scalar_const(x)).collect()
}

fn batch_with(coefs: &[f64]) -> Vec<AnnotatedPair> {
    let mut pairs = random_instance(1, coefs.len(), 0.5).unwrap().pairs;
    for (p, &c) in pairs.iter_mut().zip(coefs) {
        p.coefficient = c;
    }
    pairs
}

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::response(ids.to_vec(), &Vocab::default()).unwrap()
}

#[test]
fn every_loss_matches_finite_differences() {
    for (name, report) in verify::check_loss_gradients(3, 20).unwrap() {
        assert!(report.passes(FD_TOLERANCE), "{name}: worst {:?}", report.worst());
    }
}

#[test]
fn dpo_gradient_identity_holds() {
    let s = verify::check_gradient_identity(5, 10, 0.5).unwrap();
    assert!(s.max_deviation < IDENTITY_TOLERANCE, "{s:?}");
    let s = verify::check_gradient_identity(6, 5, 0.0).unwrap();
    assert!(s.max_deviation < IDENTITY_TOLERANCE, "{s:?}");
}

#[test]
fn identity_alpha_zero_gives_vanilla_weights() {
    let inst = random_instance(8, 4, 0.0).unwrap();
    let mut reference = ReferenceSnapshot::new(inst.reference.clone()).unwrap();
    let rc = AlignConfig {
        use_coefficients: true,
        ..AlignConfig::default()
    };
    let vanilla = AlignConfig::default();
    let a = dpo_rc_gradient_identity_check(&inst.policy, &mut reference, &inst.pairs, &rc).unwrap();
    let b = dpo_rc_gradient_identity_check(&inst.policy, &mut reference, &inst.pairs, &vanilla).unwrap();
    assert_eq!(a.pair_weights, b.pair_weights);
    for w in &a.pair_weights {
        assert!(*w > 0.0 && *w < vanilla.dpo_beta);
    }
}

#[test]
fn doubling_a_coefficient_doubles_its_contribution() {
    assert!(verify::check_coefficient_linearity(9).unwrap() < 1e-12);
}

#[test]
fn alpha_zero_reductions_are_bitwise() {
    for (method, equal) in verify::check_reductions(10).unwrap() {
        assert!(equal, "{method}");
    }
}

#[test]
fn regularizer_zero_sets() {
    for (name, ok) in verify::check_regularizer_semantics(11).unwrap() {
        assert!(ok, "{name}");
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn rrhf_examples() {
    let batch = batch_with(&[0.7071]);
    let mut t = Tape::new();
    let pw = consts(&mut t, &[-1.0]);
    let pl = consts(&mut t, &[-1.2]);
    let cfg = AlignConfig {
        method: Method::Rrhf,
        use_coefficients: true,
        rrhf_hinge_mode: HingeMode::Paper,
        ..AlignConfig::default()
    };
    let r = rrhf_ranking_on_logprobs(&mut t, &pw, &pl, &batch, &cfg).unwrap();
    assert!((t.scalar(r) + 0.14142).abs() < 1e-5, "{}", t.scalar(r));
    let orig = AlignConfig {
        rrhf_hinge_mode: HingeMode::Original,
        ..cfg
    };
    let r = rrhf_ranking_on_logprobs(&mut t, &pw, &pl, &batch, &orig).unwrap();
    assert_eq!(t.scalar(r), 0.0);

    let eq = consts(&mut t, &[-0.5]);
    for mode in [HingeMode::Paper, HingeMode::Original] {
        let c = AlignConfig {
            rrhf_hinge_mode: mode,
            ..cfg
        };
        let r = rrhf_ranking_on_logprobs(&mut t, &eq, &eq, &batch, &c).unwrap();
        assert_eq!(t.scalar(r), 0.0);
    }
}

#[test]
fn rrhf_equal_logprobs_leave_only_sft() {
    // the same response as winner and loser gives p_w == p_l exactly
    let inst = random_instance(12, 2, 0.5).unwrap();
    let mut pairs = inst.pairs.clone();
    for p in &mut pairs {
        p.pair.y_l = p.pair.y_w.clone();
    }
    let cfg = AlignConfig {
        method: Method::Rrhf,
        use_coefficients: true,
        ..AlignConfig::default()
    };
    let mut t = Tape::new();
    let m = BoundModel::bind(&mut t, &inst.policy, true).unwrap();
    let g = rrhf_loss(&mut t, &m, &pairs, &cfg).unwrap();
    let b = g.bundle(&t);
    assert_eq!(b.component("ranking"), Some(0.0));
    assert_eq!(b.total, b.component("sft").unwrap());
}

#[test]
fn rrhf_zero_sft_weight_drops_the_term() {
    let inst = random_instance(13, 3, 0.5).unwrap();
    let cfg = AlignConfig {
        method: Method::Rrhf,
        rrhf_sft_weight: 0.0,
        ..AlignConfig::default()
    };
    let mut t = Tape::new();
    let m = BoundModel::bind(&mut t, &inst.policy, true).unwrap();
    let g = rrhf_loss(&mut t, &m, &inst.pairs, &cfg).unwrap();
    let b = g.bundle(&t);
    assert!(b.component("sft").is_none());
    assert_eq!(b.total, b.component("ranking").unwrap());
}

#[test]
fn dpo_examples() {
    let batch = batch_with(&[1.0]);
    let mut t = Tape::new();
    let cfg = AlignConfig::default();
    let pw = consts(&mut t, &[-3.0]);
    let pl = consts(&mut t, &[-5.0]);
    // log-ratios +1 and -1 against references -4 and -4
    let g = dpo_on_logprobs(&mut t, &pw, &pl, &[-4.0], &[-4.0], &batch, &cfg).unwrap();
    assert!((t.scalar(g.total) - 0.5130).abs() < 1e-4, "{}", t.scalar(g.total));

    let batch = batch_with(&[0.5, 2.0]);
    let rc = AlignConfig {
        use_coefficients: true,
        ..cfg
    };
    let pw = consts(&mut t, &[-3.0, -2.0]);
    let pl = consts(&mut t, &[-5.0, -6.0]);
    let g = dpo_on_logprobs(&mut t, &pw, &pl, &[-3.0, -2.0], &[-5.0, -6.0], &batch, &rc).unwrap();
    let expect = (0.5 + 2.0) / 2.0 * 2f64.ln();
    assert!((t.scalar(g.total) - expect).abs() < 1e-15);
}

#[test]
fn dpo_at_reference_is_ln2_per_pair() {
    let inst = random_instance(14, 3, 0.5).unwrap();
    let mut reference = ReferenceSnapshot::new(inst.policy.clone()).unwrap();
    let cfg = AlignConfig {
        use_coefficients: true,
        ..AlignConfig::default()
    };
    let mut t = Tape::new();
    let m = BoundModel::bind(&mut t, &inst.policy, true).unwrap();
    let g = dpo_loss(&mut t, &m, &mut reference, &inst.pairs, &cfg).unwrap();
    let mean_c: f64 = inst.pairs.iter().map(|p| p.coefficient).sum::<f64>() / 3.0;
    assert!((t.scalar(g.total) - mean_c * 2f64.ln()).abs() < 1e-12);
    // reference and coefficients are constants: only policy leaves on the tape
    assert_eq!(t.param_count(), inst.policy.iter().count());
}

#[test]
fn dpo_rejects_mismatched_reference() {
    let inst = random_instance(15, 2, 0.5).unwrap();
    let other = ParameterStore::init(
        ModelKind::Policy,
        Vocab::new(80).unwrap(),
        verify::tiny_config(),
        1,
    )
    .unwrap();
    let mut reference = ReferenceSnapshot::new(other).unwrap();
    let mut t = Tape::new();
    let m = BoundModel::bind(&mut t, &inst.policy, true).unwrap();
    let err = dpo_loss(&mut t, &m, &mut reference, &inst.pairs, &AlignConfig::default()).unwrap_err();
    assert!(matches!(err, Error::ModelMismatch(_)));
}

#[test]
fn kto_examples() {
    let inst = random_instance(16, 3, 0.5).unwrap();
    let cfg = AlignConfig {
        method: Method::Kto,
        use_coefficients: true,
        ..AlignConfig::default()
    };
    let mut reference = ReferenceSnapshot::new(inst.policy.clone()).unwrap();
    let mut t = Tape::new();
    let m = BoundModel::bind(&mut t, &inst.policy, true).unwrap();
    let b = kto_loss(&mut t, &m, &mut reference, &inst.pairs, &cfg).unwrap().bundle(&t);
    // every v = 1/2; two points per pair, mean over 6 points
    let sum_c: f64 = inst.pairs.iter().map(|p| p.coefficient).sum();
    assert!((b.total - 2.0 * 0.5 * sum_c / 6.0).abs() < 1e-12, "{b:?}");

    let doubled = AlignConfig {
        kto_lambda_desirable: 2.0,
        ..cfg
    };
    let mut reference = ReferenceSnapshot::new(inst.reference.clone()).unwrap();
    let mut t = Tape::new();
    let m = BoundModel::bind(&mut t, &inst.policy, true).unwrap();
    let one = kto_loss(&mut t, &m, &mut reference, &inst.pairs, &cfg).unwrap().bundle(&t);
    let two = kto_loss(&mut t, &m, &mut reference, &inst.pairs, &doubled).unwrap().bundle(&t);
    assert_eq!(two.component("desirable").unwrap(), 2.0 * one.component("desirable").unwrap());
    assert_eq!(two.component("undesirable"), one.component("undesirable"));
}

#[test]
fn kto_rejects_single_class() {
    let mut t = Tape::new();
    let lp = t.scalar_const(-1.0);
    let p = KtoPoint {
        logprob: lp,
        ref_logprob: -1.0,
        desirable: true,
        coefficient: 1.0,
    };
    let err = kto_on_points(&mut t, &[p, p], &AlignConfig::default(), None).unwrap_err();
    assert!(matches!(err, Error::SingleClassBatch { .. }));
}

#[test]
fn sft_uniform_and_descent() {
    let mut p = ParameterStore::init(ModelKind::Policy, Vocab::default(), verify::tiny_config(), 2).unwrap();
    for name in ["lm_head.weight", "lm_head.bias"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let x = TokenSequence::query(vec![10, 11], &Vocab::default()).unwrap();
    let y = seq(&[20, 21, 22]);
    let mut t = Tape::new();
    let m = BoundModel::bind(&mut t, &p, true).unwrap();
    let g = sft_loss(&mut t, &m, &[(&x, &y)]).unwrap();
    assert!((t.scalar(g.total) - 64f64.ln()).abs() < 1e-12);

    let mut opt = Adam::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    });
    let mut last = f64::INFINITY;
    for _ in 0..20 {
        let mut t = Tape::new();
        let m = BoundModel::bind(&mut t, &p, true).unwrap();
        let g = sft_loss(&mut t, &m, &[(&x, &y)]).unwrap();
        let v = t.scalar(g.total);
        assert!(v < last, "{v} !< {last}");
        last = v;
        let grads = m.param_grads(&t, &t.backward(g.total).unwrap());
        opt.step(&mut p, &grads).unwrap();
    }
}

#[test]
fn empty_batches_are_rejected() {
    let inst = random_instance(17, 1, 0.5).unwrap();
    let mut reference = ReferenceSnapshot::new(inst.reference).unwrap();
    let mut t = Tape::new();
    let m = BoundModel::bind(&mut t, &inst.policy, true).unwrap();
    for method in [Method::Rrhf, Method::Dpo, Method::Kto] {
        let cfg = AlignConfig {
            method,
            ..AlignConfig::default()
        };
        assert!(matches!(
            alignment_loss(&mut t, &m, &mut reference, &[], &cfg),
            Err(Error::EmptyBatch { .. })
        ));
    }
    assert!(matches!(sft_loss(&mut t, &m, &[]), Err(Error::EmptyBatch { .. })));
}

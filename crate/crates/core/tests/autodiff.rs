use prefdiff_core::gradcheck::{numerical_gradient, GradCheckReport, FD_STEP};
use prefdiff_core::{Array, Error, Tape, Var};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random_array(rng: &mut impl Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element contributes to the checked gradient.
fn scalarize(tape: &mut Tape, out: Var, weights: &Array) -> Var {
    if tape.value(out).is_scalar() {
        return out;
    }
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn eval(build: &Build, inputs: &[Array], weights: &Option<Array>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = match weights {
        Some(w) => scalarize(&mut tape, out, w),
        None => out,
    };
    tape.scalar(root)
}

/// Compares analytic and central-difference gradients of `build` on
/// `trials` seeded random inputs.
fn check_op(name: &str, shapes: &[&[usize]], build: &Build, prep: fn(&mut Array), trials: u64) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut rng = prefdiff_core::seed::derived_rng(7, name, 0);
    for t in 0..trials {
        let inputs: Vec<Array> = shapes
            .iter()
            .map(|s| {
                let mut a = random_array(&mut rng, s);
                prep(&mut a);
                a
            })
            .collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let out = build(&mut tape, &vars);
        let weights = if tape.value(out).is_scalar() {
            None
        } else {
            Some(random_array(&mut rng, tape.value(out).shape()))
        };
        let root = match &weights {
            Some(w) => scalarize(&mut tape, out, w),
            None => out,
        };
        let grads = tape.backward(root).unwrap();

        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(&tape, vars[k]);
            let numeric = numerical_gradient(
                |p| {
                    let mut xs = inputs.clone();
                    xs[k] = Array::new(input.shape().to_vec(), p.to_vec()).unwrap();
                    eval(build, &xs, &weights)
                },
                input.data(),
                FD_STEP,
            );
            for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
                report.push(format!("{name} trial {t} input {k}[{i}]"), a, n);
            }
        }
    }
    report
}

fn no_prep(_: &mut Array) {}

fn positive(a: &mut Array) {
    for v in a.data_mut() {
        *v = v.abs() + 0.5;
    }
}

fn away_from_zero(a: &mut Array) {
    for v in a.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
}

macro_rules! fd_case {
    ($test:ident, $shapes:expr, $prep:expr, |$t:ident, $v:ident| $body:expr) => {
        #[test]
        fn $test() {
            let build = |$t: &mut Tape, $v: &[Var]| -> Var { $body };
            let report = check_op(stringify!($test), $shapes, &build, $prep, 100);
            let worst = report.worst().unwrap();
            assert!(report.passes(1e-4), "worst probe {worst:?}");
        }
    };
}

fd_case!(fd_add, &[&[3, 4], &[3, 4]], no_prep, |t, v| t.add(v[0], v[1]).unwrap());
fd_case!(fd_sub, &[&[3, 4], &[3, 4]], no_prep, |t, v| t.sub(v[0], v[1]).unwrap());
fd_case!(fd_mul, &[&[3, 4], &[3, 4]], no_prep, |t, v| t.mul(v[0], v[1]).unwrap());
fd_case!(fd_scale_offset, &[&[5]], no_prep, |t, v| {
    let s = t.scale(v[0], -1.7);
    t.offset(s, 0.3)
});
fd_case!(fd_add_row, &[&[3, 4], &[4]], no_prep, |t, v| t.add_row(v[0], v[1]).unwrap());
fd_case!(fd_mul_row, &[&[3, 4], &[4]], no_prep, |t, v| t.mul_row(v[0], v[1]).unwrap());
fd_case!(fd_matmul, &[&[3, 4], &[4, 2]], no_prep, |t, v| t.matmul(v[0], v[1]).unwrap());
fd_case!(fd_transpose, &[&[3, 4]], no_prep, |t, v| t.transpose(v[0]).unwrap());
fd_case!(fd_softmax, &[&[3, 5]], no_prep, |t, v| t.softmax_rows(v[0], None).unwrap());
fd_case!(fd_causal_softmax, &[&[3, 5]], no_prep, |t, v| t.softmax_rows(v[0], Some(2)).unwrap());
fd_case!(fd_log_softmax, &[&[3, 5]], no_prep, |t, v| t.log_softmax_rows(v[0]).unwrap());
fd_case!(fd_sigmoid, &[&[6]], no_prep, |t, v| t.sigmoid(v[0]));
fd_case!(fd_log_sigmoid, &[&[6]], no_prep, |t, v| t.log_sigmoid(v[0]));
fd_case!(fd_log, &[&[6]], positive, |t, v| t.log(v[0]));
fd_case!(fd_exp, &[&[6]], no_prep, |t, v| t.exp(v[0]));
fd_case!(fd_square, &[&[6]], no_prep, |t, v| t.square(v[0]));
fd_case!(fd_gelu, &[&[6]], no_prep, |t, v| t.gelu(v[0]));
fd_case!(fd_max_const, &[&[6]], away_from_zero, |t, v| t.max_const(v[0], 0.0));
fd_case!(fd_sum, &[&[2, 3]], no_prep, |t, v| t.sum(v[0]));
fd_case!(fd_mean, &[&[2, 3]], no_prep, |t, v| t.mean(v[0]));
fd_case!(fd_gather_rows, &[&[4, 3]], no_prep, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap());
fd_case!(fd_pick, &[&[3, 4]], no_prep, |t, v| t.pick(v[0], &[3, 0, 1]).unwrap());
fd_case!(fd_concat_rows, &[&[2, 3], &[1, 3]], no_prep, |t, v| t.concat(&[v[0], v[1]], 0).unwrap());
fd_case!(fd_concat_cols, &[&[2, 3], &[2, 1]], no_prep, |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
fd_case!(fd_slice_rows, &[&[4, 3]], no_prep, |t, v| t.slice_rows(v[0], 1, 2).unwrap());
fd_case!(fd_slice_cols, &[&[3, 4]], no_prep, |t, v| t.slice_cols(v[0], 1, 2).unwrap());
fd_case!(fd_layer_norm, &[&[3, 5]], no_prep, |t, v| t.layer_norm(v[0], 1e-5).unwrap());
fd_case!(fd_reshape, &[&[2, 3]], no_prep, |t, v| t.reshape(v[0], &[3, 2]).unwrap());
fd_case!(fd_fan_out, &[&[4]], no_prep, |t, v| {
    let a = t.mul(v[0], v[0]).unwrap();
    let b = t.exp(v[0]);
    t.add(a, b).unwrap()
});

#[test]
fn two_layer_net_matches_finite_differences() {
    // x[5,4] -> tanh-free MLP with GELU -> log-softmax CE on fixed targets
    let build = |t: &mut Tape, v: &[Var]| -> Var {
        let (x, w1, b1, w2) = (v[0], v[1], v[2], v[3]);
        let h = t.matmul(x, w1).unwrap();
        let h = t.add_row(h, b1).unwrap();
        let h = t.gelu(h);
        let o = t.matmul(h, w2).unwrap();
        let lp = t.log_softmax_rows(o).unwrap();
        let picked = t.pick(lp, &[0, 2, 1, 1, 0]).unwrap();
        let m = t.mean(picked);
        t.neg(m)
    };
    let report = check_op("two_layer", &[&[5, 4], &[4, 6], &[6], &[6, 3]], &build, no_prep, 5);
    assert!(report.passes(1e-4), "worst probe {:?}", report.worst());
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let z = t.scalar_const(0.0);
    let s = t.sigmoid(z);
    assert_eq!(t.scalar(s), 0.5);

    let a = t.constant(Array::matrix(1, 3, vec![0.7; 3]).unwrap());
    let ls = t.log_softmax_rows(a).unwrap();
    for &v in t.value(ls).data() {
        assert!((v + 3f64.ln()).abs() < 1e-15);
    }

    let i3 = t.constant(Array::identity(3));
    let m = Array::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.25, -7.0, 9.0]).unwrap();
    let mv = t.constant(m.clone());
    let p = t.matmul(i3, mv).unwrap();
    assert_eq!(t.value(p), &m);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Array::scalar(2.0));
    let y = t.param(Array::scalar(3.0));
    let xy = t.mul(x, y).unwrap();
    let g = t.backward(xy).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 3.0);
    assert_eq!(g.get(y).unwrap().item(), 2.0);

    let mut t = Tape::new();
    let x = t.param(Array::scalar(0.0));
    let s = t.sigmoid(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 0.25);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut t = Tape::new();
    let x = t.param(Array::vector(vec![1.0, 2.0]));
    let s = t.square(x);
    assert!(matches!(t.backward(s), Err(Error::NonScalarRoot { .. })));
}

#[test]
fn shape_errors_name_the_shapes() {
    let mut t = Tape::new();
    let a = t.param(Array::zeros(&[2, 3]));
    let b = t.param(Array::zeros(&[2, 2]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    let msg = t.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let x = t.param(Array::scalar(1.5));
    let c = t.constant(Array::scalar(4.0));
    let d = t.detach(x);
    let p = t.mul(x, c).unwrap();
    let q = t.mul(p, d).unwrap();
    let g = t.backward(q).unwrap();
    assert!(g.get(c).is_none());
    assert!(g.get(d).is_none());
    // d/dx [x * 4 * stop(x)] = 4 * 1.5
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut t = Tape::new();
    let a = t.param(Array::matrix(1, 3, vec![1000.0, 0.0, -1000.0]).unwrap());
    let ls = t.log_softmax_rows(a).unwrap();
    assert!(t.value(ls).is_finite());
    assert_eq!(t.value(ls).data()[0], 0.0);
    let z = t.scalar_const(-800.0);
    let l = t.log_sigmoid(z);
    assert!((t.scalar(l) + 800.0).abs() < 1e-12);
}

#[test]
fn causal_mask_zeroes_future_columns() {
    let mut t = Tape::new();
    let a = t.param(Array::zeros(&[2, 3]));
    let s = t.softmax_rows(a, Some(1)).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    assert!(t.softmax_rows(a, Some(0)).is_err());
}

fn grads_of(build: impl Fn(&mut Tape, Var) -> Var, x: &Array) -> Vec<f64> {
    let mut t = Tape::new();
    let v = t.param(x.clone());
    let r = build(&mut t, v);
    t.backward(r).unwrap().get_or_zeros(&t, v).into_data()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_are_linear(data in prop::collection::vec(-3.0f64..3.0, 6)) {
        let x = Array::vector(data);
        let f = |t: &mut Tape, v: Var| { let s = t.sigmoid(v); t.sum(s) };
        let g = |t: &mut Tape, v: Var| { let s = t.square(v); t.mean(s) };
        let joint = grads_of(|t, v| { let a = f(t, v); let b = g(t, v); t.add(a, b).unwrap() }, &x);
        let ga = grads_of(f, &x);
        let gb = grads_of(g, &x);
        for i in 0..joint.len() {
            prop_assert!((joint[i] - (ga[i] + gb[i])).abs() <= 1e-14);
        }
    }

    #[test]
    fn backward_is_deterministic(data in prop::collection::vec(-3.0f64..3.0, 12)) {
        let x = Array::matrix(3, 4, data).unwrap();
        let build = |t: &mut Tape, v: Var| {
            let s = t.softmax_rows(v, None).unwrap();
            let n = t.layer_norm(s, 1e-5).unwrap();
            let e = t.gelu(n);
            t.sum(e)
        };
        let a = grads_of(build, &x);
        let b = grads_of(build, &x);
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(x in -1e3f64..1e3) {
        let mut t = Tape::new();
        let v = t.scalar_const(x);
        let s = t.sigmoid(v);
        let l = t.log_sigmoid(v);
        prop_assert!((0.0..=1.0).contains(&t.scalar(s)));
        prop_assert!(t.scalar(l) <= 0.0 && t.scalar(l).is_finite());
    }
}

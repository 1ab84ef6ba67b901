//! Central finite differences for checking analytic gradients.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of the backward rules it is used to check.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{BoundModel, ParameterStore};
use crate::seed::Rng;

/// Denominator floor for relative errors. Gradients smaller than this are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`
pub fn central_difference<F>(mut f: F, point: &[f64], index: usize, step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = point.to_vec();
    p[index] = point[index] + step;
    let plus = f(&p);
    p[index] = point[index] - step;
    let minus = f(&p);
    (plus - minus) / (2.0 * step)
}

/// Full numerical gradient by central differences.
pub fn numerical_gradient<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    (0..point.len())
        .map(|i| central_difference(&mut f, point, i, step))
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One compared coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn push(&mut self, label: impl Into<String>, analytic: f64, numeric: f64) {
        self.probes.push(Probe {
            label: label.into(),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }

    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.probes.is_empty() && self.max_rel_error() < tol
    }
}


/// Checks `d loss / d params` of a model-based loss against central
/// differences at `probes` randomly chosen parameter coordinates.
///
/// `loss` builds the scalar on a tape where `store` is bound trainable; it
/// is rebuilt from scratch for every perturbed evaluation.
pub fn check_param_gradients<F>(
    store: &ParameterStore,
    probes: usize,
    rng: &mut Rng,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &BoundModel) -> Result<Var>,
{
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, store, true)?;
    let root = loss(&mut tape, &model)?;
    let grads = tape.backward(root)?;
    let analytic = model.param_grads(&tape, &grads);

    let names: Vec<(&str, usize)> = store.iter().map(|(n, a)| (n, a.len())).collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for _ in 0..probes {
        // uniform over scalar coordinates
        let mut k = rng.random_range(0..total);
        let (name, idx) = names
            .iter()
            .find_map(|&(n, len)| {
                if k < len {
                    Some((n, k))
                } else {
                    k -= len;
                    None
                }
            })
            .expect("index within total");
        let orig = store.get(name)?.data()[idx];
        let mut eval_at = |v: f64| -> Result<f64> {
            work.get_mut(name)?.data_mut()[idx] = v;
            let mut t = Tape::new();
            let m = BoundModel::bind(&mut t, &work, false)?;
            let r = loss(&mut t, &m)?;
            Ok(t.scalar(r))
        };
        let plus = eval_at(orig + FD_STEP)?;
        let minus = eval_at(orig - FD_STEP)?;
        work.get_mut(name)?.data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.push(format!("{name}[{idx}]"), analytic[name].data()[idx], numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = numerical_gradient(f, &[1.0, 2.0], FD_STEP);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floors_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 2e-12) < 1e-5);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}

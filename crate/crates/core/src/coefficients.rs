//! Reward-difference coefficients: `R` from a scoring model and the per-pair
//! weight `max(R, eps)^alpha` used by the `+rc` alignment losses.

use serde::{Deserialize, Serialize};

use crate::datagen::PreferenceRecord;
use crate::error::{Error, Result};
use crate::model::{Evaluator, ModelKind, ParameterStore};
use crate::scoring::PreferencePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientSource {
    None,
    RewardModel,
    DifferenceModel,
}

impl CoefficientSource {
    /// Model kind needed to compute raw differences, if any.
    pub fn required_kind(self) -> Option<ModelKind> {
        match self {
            CoefficientSource::None => None,
            CoefficientSource::RewardModel => Some(ModelKind::Reward),
            CoefficientSource::DifferenceModel => Some(ModelKind::Difference),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientConfig {
    pub source: CoefficientSource,
    pub alpha: f64,
    pub clamp_epsilon: f64,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            source: CoefficientSource::None,
            alpha: 0.5,
            clamp_epsilon: 1e-2,
        }
    }
}

impl CoefficientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if !(self.clamp_epsilon > 0.0) || !self.clamp_epsilon.is_finite() {
            return Err(Error::config("clamp_epsilon", "must be a positive number"));
        }
        Ok(())
    }
}

/// `max(raw, eps)^alpha`. With `alpha = 0` the result is exactly 1.
pub fn apply_alpha(raw: f64, cfg: &CoefficientConfig) -> f64 {
    if cfg.alpha == 0.0 {
        return 1.0;
    }
    raw.max(cfg.clamp_epsilon).powf(cfg.alpha)
}

fn check_source(source: CoefficientSource, model: Option<&Evaluator>) -> Result<()> {
    if let Some(kind) = source.required_kind() {
        match model {
            None => return Err(Error::MissingModel { kind: kind.name() }),
            Some(ev) if ev.model().kind() != kind => {
                return Err(Error::ModelMismatch(format!(
                    "coefficient source needs a {kind} model, got {}",
                    ev.model().kind()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// `R` for one pair: `r(x, y_w) - r(x, y_l)`, `f(x, y_w, y_l)`, or 1 when
/// there is no source.
pub fn raw_difference(pair: &PreferencePair, source: CoefficientSource, model: Option<&mut Evaluator>) -> Result<f64> {
    check_source(source, model.as_deref())?;
    match (source, model) {
        (CoefficientSource::None, _) => Ok(1.0),
        (CoefficientSource::RewardModel, Some(ev)) => {
            let w = ev.reward(&pair.query, &pair.y_w)?;
            let l = ev.reward(&pair.query, &pair.y_l)?;
            Ok(w - l)
        }
        (CoefficientSource::DifferenceModel, Some(ev)) => ev.difference(&pair.query, &pair.y_w, &pair.y_l),
        _ => unreachable!("checked above"),
    }
}

/// Counts gathered while annotating.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub pairs: usize,
    /// Pairs whose raw difference was below `clamp_epsilon`.
    pub clamped: usize,
    pub mean_coefficient: f64,
}

/// Writes `raw_difference` and `coefficient` into every pair.
pub fn annotate_dataset(
    records: &[PreferenceRecord],
    cfg: &CoefficientConfig,
    model: Option<&ParameterStore>,
) -> Result<(Vec<PreferenceRecord>, AnnotationStats)> {
    cfg.validate()?;
    let mut ev = match (cfg.source.required_kind(), model) {
        (None, _) => None,
        (Some(kind), None) => return Err(Error::MissingModel { kind: kind.name() }),
        (Some(_), Some(store)) => Some(Evaluator::new(store)?),
    };
    check_source(cfg.source, ev.as_ref())?;
    let mut out = Vec::with_capacity(records.len());
    let mut stats = AnnotationStats::default();
    let mut coef_sum = 0.0;
    for (index, record) in records.iter().enumerate() {
        let mut r = record.clone();
        for (rp, pair) in r.pairs.iter_mut().zip(record.preference_pairs()) {
            let raw = raw_difference(&pair, cfg.source, ev.as_mut()).map_err(|e| Error::Record {
                index,
                message: e.to_string(),
            })?;
            if !raw.is_finite() {
                return Err(Error::Record {
                    index,
                    message: format!("raw difference {raw} is not finite"),
                });
            }
            let c = apply_alpha(raw, cfg);
            if raw < cfg.clamp_epsilon {
                stats.clamped += 1;
            }
            rp.raw_difference = Some(raw);
            rp.coefficient = Some(c);
            stats.pairs += 1;
            coef_sum += c;
        }
        out.push(r);
    }
    if stats.pairs > 0 {
        stats.mean_coefficient = coef_sum / stats.pairs as f64;
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alpha: f64) -> CoefficientConfig {
        CoefficientConfig {
            source: CoefficientSource::RewardModel,
            alpha,
            clamp_epsilon: 0.01,
        }
    }

    #[test]
    fn alpha_examples() {
        assert!((apply_alpha(0.5, &cfg(0.5)) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(apply_alpha(0.5, &cfg(0.0)), 1.0);
        assert_eq!(apply_alpha(-3.0, &cfg(0.0)), 1.0);
        assert_eq!(apply_alpha(f64::INFINITY, &cfg(0.0)), 1.0);
        assert_eq!(apply_alpha(-2.0, &cfg(1.0)), 0.01);
        assert_eq!(apply_alpha(2.5, &cfg(1.0)), 2.5);
    }

    #[test]
    fn validation() {
        assert!(cfg(1.5).validate().is_err());
        assert!(cfg(-0.1).validate().is_err());
        let mut c = cfg(0.5);
        c.clamp_epsilon = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_model_names_the_kind() {
        let err = annotate_dataset(&[], &cfg(0.5), None).unwrap_err();
        assert!(err.to_string().contains("reward"), "{err}");
        let c = CoefficientConfig {
            source: CoefficientSource::DifferenceModel,
            ..cfg(0.5)
        };
        let err = annotate_dataset(&[], &c, None).unwrap_err();
        assert!(err.to_string().contains("difference"), "{err}");
    }
}

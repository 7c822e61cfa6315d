//! Substitution estimators: censored values replaced by a fixed number, then a
//! full-data GLM fit.

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::glm::{self, GlmFamily, GlmFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubstitutionKind {
    AtLimit,
    AtLimitOverSqrt2,
    AtZero,
    ConditionalMean,
}

/// A substitution rule. `ConditionalMean` needs `E(Z | Z < L)` supplied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstitutionRule {
    pub kind: SubstitutionKind,
    pub conditional_mean_value: Option<f64>,
}

impl SubstitutionRule {
    pub const AT_LIMIT: Self = SubstitutionRule { kind: SubstitutionKind::AtLimit, conditional_mean_value: None };
    pub const AT_LIMIT_OVER_SQRT2: Self =
        SubstitutionRule { kind: SubstitutionKind::AtLimitOverSqrt2, conditional_mean_value: None };
    pub const AT_ZERO: Self = SubstitutionRule { kind: SubstitutionKind::AtZero, conditional_mean_value: None };

    pub fn conditional_mean(value: f64) -> Self {
        SubstitutionRule { kind: SubstitutionKind::ConditionalMean, conditional_mean_value: Some(value) }
    }

    /// Value assigned to censored rows on the concentration scale.
    pub fn fill_value(&self, limit: f64) -> Result<f64> {
        match self.kind {
            SubstitutionKind::AtLimit => Ok(limit),
            SubstitutionKind::AtLimitOverSqrt2 => Ok(limit / std::f64::consts::SQRT_2),
            SubstitutionKind::AtZero => Ok(0.0),
            SubstitutionKind::ConditionalMean => match self.conditional_mean_value {
                Some(v) if v > 0.0 && v < limit => Ok(v),
                Some(v) => Err(Error::Config(format!("E(Z|Z<L)={v} must lie in (0, {limit})"))),
                None => Err(Error::Config("conditional-mean substitution needs a value for E(Z|Z<L)".into())),
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SubstitutionKind::AtLimit => "sub_L",
            SubstitutionKind::AtLimitOverSqrt2 => "sub_Lsqrt2",
            SubstitutionKind::AtZero => "sub_zero",
            SubstitutionKind::ConditionalMean => "sub_condmean",
        }
    }
}

/// Fully observed GLM data on the concentration scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FilledDataset {
    pub y: Vec<f64>,
    /// Row-major `n × p`.
    pub x: Vec<f64>,
    pub p: usize,
    pub z: Vec<f64>,
    /// Rows whose `z` came from a fill rule rather than a measurement.
    pub filled: Vec<bool>,
}

impl FilledDataset {
    /// Detected rows keep `h(v)`; censored rows start at NaN until a rule is applied.
    pub fn from_observed(data: &ObservationSet) -> Self {
        let z = (0..data.n()).map(|i| if data.delta()[i] { data.z(i) } else { f64::NAN }).collect();
        FilledDataset {
            y: data.y().to_vec(),
            x: data.x_flat().to_vec(),
            p: data.p(),
            z,
            filled: data.delta().iter().map(|d| !d).collect(),
        }
    }

    /// Uses known true values for every row (the full-data benchmark).
    pub fn from_latent(data: &ObservationSet, latent_z: &[f64]) -> Result<Self> {
        if latent_z.len() != data.n() {
            return Err(Error::Validation("latent covariate length mismatch".into()));
        }
        Ok(FilledDataset {
            y: data.y().to_vec(),
            x: data.x_flat().to_vec(),
            p: data.p(),
            z: latent_z.to_vec(),
            filled: vec![false; data.n()],
        })
    }

    pub fn apply(mut self, rule: &SubstitutionRule, limit: f64) -> Result<Self> {
        let value = rule.fill_value(limit)?;
        for (z, &f) in self.z.iter_mut().zip(&self.filled) {
            if f {
                *z = value;
            }
        }
        Ok(self)
    }

    pub fn design(&self) -> Vec<f64> {
        let layout = crate::data::Layout { p: self.p };
        let k = layout.dim();
        let mut d = vec![0.0; self.y.len() * k];
        for i in 0..self.y.len() {
            layout.fill(&self.x[i * self.p..(i + 1) * self.p], self.z[i], &mut d[i * k..(i + 1) * k]);
        }
        d
    }

    pub fn fit(&self, family: GlmFamily) -> Result<GlmFit> {
        if self.z.iter().any(|z| z.is_nan()) {
            return Err(Error::Validation("censored rows have not been filled".into()));
        }
        glm::fit_glm(&self.design(), self.p + 2, &self.y, family)
    }
}

/// Replaces censored covariate values according to `rule`.
pub fn substitute(data: &ObservationSet, rule: &SubstitutionRule) -> Result<FilledDataset> {
    FilledDataset::from_observed(data).apply(rule, data.limit())
}

pub fn fit_substitution(data: &ObservationSet, rule: &SubstitutionRule, family: GlmFamily) -> Result<GlmFit> {
    substitute(data, rule)?.fit(family)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{transform_limit, Transformation};

    fn small() -> ObservationSet {
        let c = transform_limit(0.4, Transformation::NegLog).unwrap();
        ObservationSet::new(
            vec![1.0, 2.0, 0.5, 1.5, 0.2],
            vec![0.1, 0.5, 0.9, 0.3, 0.7],
            1,
            vec![0.1, c, 0.5, c, 0.2],
            vec![true, false, true, false, true],
            c,
        )
        .unwrap()
    }

    #[test]
    fn fill_values() {
        let d = small();
        let f = substitute(&d, &SubstitutionRule::AT_LIMIT_OVER_SQRT2).unwrap();
        assert!((f.z[1] - 0.282_842_712_474_619).abs() < 1e-12);
        assert_eq!(substitute(&d, &SubstitutionRule::AT_ZERO).unwrap().z[3], 0.0);
        assert!((substitute(&d, &SubstitutionRule::AT_LIMIT).unwrap().z[3] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn detected_rows_untouched_and_idempotent() {
        let d = small();
        for rule in [SubstitutionRule::AT_LIMIT, SubstitutionRule::AT_ZERO, SubstitutionRule::conditional_mean(0.2)] {
            let f = substitute(&d, &rule).unwrap();
            for i in 0..d.n() {
                if d.delta()[i] {
                    assert_eq!(f.z[i], d.z(i));
                }
            }
            let twice = f.clone().apply(&rule, d.limit()).unwrap();
            assert_eq!(f, twice);
        }
    }

    #[test]
    fn conditional_mean_requires_value() {
        let d = small();
        let bad = SubstitutionRule { kind: SubstitutionKind::ConditionalMean, conditional_mean_value: None };
        assert!(matches!(substitute(&d, &bad), Err(Error::Config(_))));
        assert!(matches!(substitute(&d, &SubstitutionRule::conditional_mean(0.5)), Err(Error::Config(_))));
    }

    #[test]
    fn uncensored_data_is_unchanged() {
        let d = ObservationSet::new(vec![1.0, 2.0, 0.5, 1.5], vec![0.1, 0.5, 0.9, 0.3], 1, vec![0.1, 0.3, 0.5, 0.2], vec![true; 4], 1.0).unwrap();
        let base = FilledDataset::from_observed(&d);
        for rule in [SubstitutionRule::AT_LIMIT, SubstitutionRule::AT_LIMIT_OVER_SQRT2, SubstitutionRule::AT_ZERO] {
            assert_eq!(substitute(&d, &rule).unwrap(), base);
        }
    }
}

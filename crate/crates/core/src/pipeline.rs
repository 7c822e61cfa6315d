//! The two-stage estimator end to end.

use crate::aft::{self, AftFit};
use crate::data::ObservationSet;
use crate::error::Result;
use crate::glm::{self, GlmFamily, GlmFit};
use crate::km;
use crate::pseudo::{self, NuisanceBundle, PseudoFitResult};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TwoStageOptions {
    /// Overrides the residual-scale truncation; defaults to the largest detected residual.
    pub tau: Option<f64>,
}

/// Every intermediate of a two-stage fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageFit {
    pub complete_case: GlmFit,
    pub aft: AftFit,
    pub nuisance: NuisanceBundle,
    pub pseudo: PseudoFitResult,
}

impl TwoStageFit {
    pub fn theta(&self) -> &[f64] {
        &self.pseudo.theta
    }
}

/// Stage 1: dispersion from the complete-case fit, Gehan slopes, and the
/// Kaplan–Meier residual distribution.
pub fn fit_nuisance(
    data: &ObservationSet,
    complete_case: &GlmFit,
    options: TwoStageOptions,
) -> Result<(AftFit, NuisanceBundle)> {
    let aft_fit = aft::fit_gehan_default(data)?;
    let eta = km::km_fit(&aft_fit.residuals, data.delta())?;
    let mut nuisance = NuisanceBundle::new(complete_case.phi, aft_fit.alpha.clone(), eta)?;
    if let Some(tau) = options.tau {
        nuisance = nuisance.with_tau(tau)?;
    }
    Ok((aft_fit, nuisance))
}

/// Stage 1 followed by the pseudo-likelihood solve started at the complete-case estimate.
pub fn fit_two_stage(data: &ObservationSet, family: GlmFamily, options: TwoStageOptions) -> Result<TwoStageFit> {
    let complete_case = glm::fit_complete_case(data, family)?;
    let (aft, nuisance) = fit_nuisance(data, &complete_case, options)?;
    let pseudo = pseudo::solve_pseudo(data, &nuisance, family, &complete_case.theta)?;
    Ok(TwoStageFit { complete_case, aft, nuisance, pseudo })
}

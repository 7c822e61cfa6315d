//! Nonparametric bootstrap of the two-stage estimator and Wald intervals.

use nalgebra::DMatrix;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::glm::GlmFamily;
use crate::par;
use crate::pipeline::{fit_two_stage, TwoStageFit, TwoStageOptions};
use crate::rng::{self, Purpose};

pub const MIN_REPLICATES: usize = 50;
const WARN_FAILED_FRACTION: f64 = 0.05;
const MAX_FAILED_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub theta_hat: Vec<f64>,
    pub boot_cov: DMatrix<f64>,
    pub n_boot: usize,
    pub n_failed: usize,
    pub seed: u64,
    pub warning: Option<String>,
}

impl BootstrapResult {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.theta_hat.len()).map(|j| self.boot_cov[(j, j)].max(0.0).sqrt()).collect()
    }
}

/// Row indices drawn with replacement for replicate `index`.
pub fn resample_indices(n: usize, seed: u64, index: usize) -> Vec<usize> {
    let mut rng = rng::stream(seed, Purpose::Bootstrap, index as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Refits both stages on replicate `index`.
pub fn replicate_fit(
    data: &ObservationSet,
    family: GlmFamily,
    options: TwoStageOptions,
    seed: u64,
    index: usize,
) -> Result<TwoStageFit> {
    let resampled = data.resample(&resample_indices(data.n(), seed, index))?;
    fit_two_stage(&resampled, family, options)
}

/// Sample covariance (divisor `m - 1`) of the rows in `draws`, summed in order.
pub fn sample_covariance(draws: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let m = draws.len();
    let mut mean = vec![0.0; k];
    for d in draws {
        mean.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for d in draws {
        for r in 0..k {
            for s in 0..=r {
                cov[(r, s)] += (d[r] - mean[r]) * (d[s] - mean[s]);
            }
        }
    }
    let denom = (m.max(2) - 1) as f64;
    for r in 0..k {
        for s in 0..=r {
            cov[(r, s)] /= denom;
            cov[(s, r)] = cov[(r, s)];
        }
    }
    cov
}

/// Bootstrap covariance of the two-stage estimate given `theta_hat` from the original data.
pub fn bootstrap_with_estimate(
    data: &ObservationSet,
    family: GlmFamily,
    theta_hat: Vec<f64>,
    n_boot: usize,
    seed: u64,
    options: TwoStageOptions,
) -> Result<BootstrapResult> {
    if n_boot < MIN_REPLICATES {
        return Err(Error::Config(format!("n_boot must be at least {MIN_REPLICATES}, got {n_boot}")));
    }
    let k = theta_hat.len();
    let replicates: Vec<Option<Vec<f64>>> = par::map_indexed(n_boot, |b| {
        replicate_fit(data, family, options, seed, b).ok().map(|f| f.pseudo.theta)
    });
    let ok: Vec<Vec<f64>> = replicates.into_iter().flatten().collect();
    let n_failed = n_boot - ok.len();
    let frac = n_failed as f64 / n_boot as f64;
    if frac > MAX_FAILED_FRACTION {
        return Err(Error::Estimation(format!("{n_failed} of {n_boot} bootstrap replicates failed")));
    }
    let warning = (frac > WARN_FAILED_FRACTION).then(|| {
        let msg = format!("{n_failed} of {n_boot} bootstrap replicates failed; variance estimate may be degraded");
        log::warn!("{msg}");
        msg
    });
    Ok(BootstrapResult { theta_hat, boot_cov: sample_covariance(&ok, k), n_boot, n_failed, seed, warning })
}

/// Fits the two-stage estimator, then bootstraps it.
pub fn bootstrap(
    data: &ObservationSet,
    family: GlmFamily,
    n_boot: usize,
    seed: u64,
    options: TwoStageOptions,
) -> Result<BootstrapResult> {
    let fit = fit_two_stage(data, family, options)?;
    bootstrap_with_estimate(data, family, fit.pseudo.theta, n_boot, seed, options)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `θ̂_j ± z_{(1+level)/2} sqrt(Σ_jj)` for every coefficient.
pub fn wald_interval(result: &BootstrapResult, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must be in (0,1), got {level}")));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok(result
        .theta_hat
        .iter()
        .zip(result.std_errors())
        .map(|(t, se)| (t - z * se, t + z * se))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(theta: f64, var: f64) -> BootstrapResult {
        BootstrapResult {
            theta_hat: vec![theta],
            boot_cov: DMatrix::from_element(1, 1, var),
            n_boot: 100,
            n_failed: 0,
            seed: 0,
            warning: None,
        }
    }

    #[test]
    fn wald_95_unit_variance() {
        let ci = wald_interval(&unit(0.0, 1.0), 0.95).unwrap();
        assert!((ci[0].0 + 1.959_964).abs() < 1e-6);
        assert!((ci[0].1 - 1.959_964).abs() < 1e-6);
    }

    #[test]
    fn wald_levels_nest() {
        let r = BootstrapResult {
            theta_hat: vec![0.3, -1.0, 2.0],
            boot_cov: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 0.01, 2.0])),
            ..unit(0.0, 1.0)
        };
        let a = wald_interval(&r, 0.90).unwrap();
        let b = wald_interval(&r, 0.95).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(y.0 < x.0 && x.1 < y.1);
        }
        assert!(wald_interval(&r, 1.0).is_err());
    }

    #[test]
    fn covariance_of_known_draws() {
        let draws = vec![vec![1.0, 2.0], vec![3.0, 2.0], vec![2.0, 5.0]];
        let c = sample_covariance(&draws, 2);
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((c[(1, 1)] - 3.0).abs() < 1e-15);
        assert!((c[(0, 1)] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_replicates_rejected() {
        let d = ObservationSet::new(vec![0.0; 4], vec![0.0, 1.0, 2.0, 3.0], 1, vec![0.1, 0.2, 0.3, 0.4], vec![true; 4], 1.0).unwrap();
        assert!(matches!(bootstrap_with_estimate(&d, GlmFamily::Gaussian, vec![0.0; 3], 10, 1, TwoStageOptions::default()), Err(Error::Config(_))));
    }
}

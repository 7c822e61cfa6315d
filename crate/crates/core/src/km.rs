//! Product-limit estimate of the residual distribution.

use crate::error::{Error, Result};

/// Right-continuous nondecreasing step function given by its jumps.
///
/// `total_mass` may be below one when the largest residual is censored; the
/// missing mass is kept as is and never renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    jump_points: Vec<f64>,
    masses: Vec<f64>,
    cumulative: Vec<f64>,
}

impl StepDistribution {
    pub fn from_jumps(jump_points: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        if jump_points.len() != masses.len() {
            return Err(Error::Validation("jump points and masses differ in length".into()));
        }
        if jump_points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("jump points must be strictly increasing".into()));
        }
        if masses.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Validation("masses must be positive".into()));
        }
        let mut acc = 0.0;
        let cumulative: Vec<f64> = masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        if acc > 1.0 + 1e-12 {
            return Err(Error::Validation(format!("total mass {acc} exceeds one")));
        }
        Ok(StepDistribution { jump_points, masses, cumulative })
    }

    pub fn jump_points(&self) -> &[f64] {
        &self.jump_points
    }
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
    pub fn total_mass(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
    pub fn len(&self) -> usize {
        self.masses.len()
    }
    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
    pub fn max_jump(&self) -> Option<f64> {
        self.jump_points.last().copied()
    }

    /// `F(t)`, right-continuous.
    pub fn cdf(&self, t: f64) -> f64 {
        let k = self.jump_points.partition_point(|&p| p <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Jumps `t` with `lower < t ≤ upper`, as slices into the distribution.
    pub fn restricted_jumps(&self, lower: f64, upper: f64) -> (&[f64], &[f64]) {
        let a = self.jump_points.partition_point(|&p| p <= lower);
        let b = self.jump_points.partition_point(|&p| p <= upper).max(a);
        (&self.jump_points[a..b], &self.masses[a..b])
    }

    /// Same distribution with every mass multiplied by `factor` (may exceed one in total).
    pub fn scaled_masses(&self, factor: f64) -> Self {
        let masses: Vec<f64> = self.masses.iter().map(|m| m * factor).collect();
        let mut acc = 0.0;
        let cumulative = masses
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        StepDistribution { jump_points: self.jump_points.clone(), masses, cumulative }
    }
}

/// Kaplan–Meier estimate of the distribution function of right-censored residuals.
///
/// Jumps sit at the distinct detected residuals. Each detected residual
/// contributes its own factor `1 - 1/R`, `R` being the number of residuals at
/// or above it, so `d` tied events give `(1 - 1/R)^d`. Censored residuals tied
/// with an event count as still at risk.
pub fn km_fit(residuals: &[f64], delta: &[bool]) -> Result<StepDistribution> {
    if residuals.len() != delta.len() || residuals.is_empty() {
        return Err(Error::Validation("residuals and indicators must be non-empty and of equal length".into()));
    }
    if !delta.iter().any(|&d| d) {
        return Err(Error::Estimation("all residuals are censored; the residual distribution is not estimable".into()));
    }
    let n = residuals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| residuals[a].total_cmp(&residuals[b]));
    let mut points = Vec::new();
    let mut masses = Vec::new();
    let mut surv = 1.0;
    let mut r = 0;
    while r < n {
        let u = residuals[order[r]];
        let mut end = r + 1;
        while end < n && residuals[order[end]] == u {
            end += 1;
        }
        let events = order[r..end].iter().filter(|&&i| delta[i]).count();
        if events > 0 {
            let at_risk = (n - r) as f64;
            let next = surv * (1.0 - 1.0 / at_risk).powi(events as i32);
            let mass = surv - next;
            if mass > 0.0 {
                points.push(u);
                masses.push(mass);
            }
            surv = next;
        }
        r = end;
    }
    StepDistribution::from_jumps(points, masses)
}

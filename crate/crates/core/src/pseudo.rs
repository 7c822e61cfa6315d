//! Second-stage estimation of the regression coefficients by pseudo-likelihood.
//!
//! With the nuisance estimates `(φ̂, α̂, η̂)` held fixed, a detected subject
//! contributes `log f(y | v, x)` and a censored subject contributes
//!
//! ```text
//! log S_i,   S_i = Σ_k f(y_i | t_k + x_i'α̂, x_i) m_k
//! ```
//!
//! over the jumps `(t_k, m_k)` of η̂ with `C - x_i'α̂ < t_k ≤ τ`.
//!
//! The estimating function omits the `1/a(φ)` factor on both kinds of
//! contribution, so it equals `a(φ̂)` times the gradient of the
//! pseudo-log-likelihood.

use nalgebra::{DMatrix, DVector};

use crate::data::{Layout, ObservationSet, Transformation};
use crate::error::{Error, Result};
use crate::glm::{sup_norm, GlmFamily};
use crate::km::StepDistribution;
use crate::par;

/// Lower bound δ₁ on the censored-subject integral.
pub const INTEGRAL_FLOOR: f64 = 1e-12;
pub const SCORE_TOL: f64 = 1e-8;
pub const MAX_ITER: usize = 200;
const MAX_HALVINGS: usize = 40;

/// First-stage estimates consumed by the pseudo-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceBundle {
    pub phi_hat: f64,
    pub alpha_hat: Vec<f64>,
    pub eta_hat: StepDistribution,
    /// Upper integration limit on the residual scale.
    pub tau: f64,
}

impl NuisanceBundle {
    /// Uses the largest jump of `eta_hat` (the largest detected residual) as `tau`.
    pub fn new(phi_hat: f64, alpha_hat: Vec<f64>, eta_hat: StepDistribution) -> Result<Self> {
        let tau = eta_hat
            .max_jump()
            .ok_or_else(|| Error::Estimation("residual distribution has no jumps".into()))?;
        if !(phi_hat > 0.0) {
            return Err(Error::Validation(format!("dispersion must be positive, got {phi_hat}")));
        }
        Ok(NuisanceBundle { phi_hat, alpha_hat, eta_hat, tau })
    }

    /// Replaces `tau`. Values below the largest jump drop the jumps above them.
    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::Config(format!("tau must be finite, got {tau}")));
        }
        if let Some(m) = self.eta_hat.max_jump() {
            if tau < m - 1e-12 {
                log::warn!("tau={tau} is below the largest residual jump {m}; jumps above tau are ignored");
            }
        }
        self.tau = tau;
        Ok(self)
    }
}

/// Normalized weights of one censored subject over the jumps in range.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredWeights {
    /// Jump points on the residual scale.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    /// `log S_i` before flooring (`-inf` when no jump is in range).
    pub log_integral: f64,
    /// Whether `S_i < δ₁`.
    pub floored: bool,
}

/// Weights `w_k ∝ f(y | t_k + x'α̂, x) m_k` for a censored subject.
pub fn censored_weights(
    x: &[f64],
    y: f64,
    theta: &[f64],
    nuisance: &NuisanceBundle,
    family: GlmFamily,
    c: f64,
) -> CensoredWeights {
    let layout = Layout { p: x.len() };
    let offset: f64 = x.iter().zip(&nuisance.alpha_hat).map(|(a, b)| a * b).sum();
    let (pts, ms) = nuisance.eta_hat.restricted_jumps(c - offset, nuisance.tau);
    let t = Transformation::NegLog;
    let log_terms: Vec<f64> = pts
        .iter()
        .zip(ms)
        .map(|(&tk, &mk)| {
            let w = layout.linear_predictor(x, t.forward(tk + offset), theta);
            family.log_density_w(y, w, nuisance.phi_hat) + mk.ln()
        })
        .collect();
    let (log_integral, weights) = normalize_log(&log_terms);
    CensoredWeights {
        points: pts.to_vec(),
        weights,
        log_integral,
        floored: !(log_integral >= INTEGRAL_FLOOR.ln()),
    }
}

fn normalize_log(log_terms: &[f64]) -> (f64, Vec<f64>) {
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return (f64::NEG_INFINITY, vec![0.0; log_terms.len()]);
    }
    let ex: Vec<f64> = log_terms.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = ex.iter().sum();
    (max + s.ln(), ex.into_iter().map(|e| e / s).collect())
}

struct CensoredSubject {
    y: f64,
    /// Row-major `m × k` designs `D(t_k + x'α̂)`.
    designs: Vec<f64>,
    log_mass: Vec<f64>,
}

/// Pseudo-likelihood for one dataset and one set of nuisance estimates, with
/// the per-subject designs precomputed.
pub struct PseudoProblem {
    family: GlmFamily,
    phi: f64,
    k: usize,
    n: usize,
    detected_y: Vec<f64>,
    detected_designs: Vec<f64>,
    censored: Vec<CensoredSubject>,
}

/// Value, estimating function and its Jacobian at one θ.
#[derive(Debug, Clone)]
pub struct PseudoEval {
    pub loglik: f64,
    pub score: Vec<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub floored: usize,
}

impl PseudoProblem {
    pub fn new(data: &ObservationSet, nuisance: &NuisanceBundle, family: GlmFamily) -> Result<Self> {
        let layout = data.layout();
        let k = layout.dim();
        if nuisance.alpha_hat.len() != data.p() {
            return Err(Error::Validation("AFT slopes do not match the covariate count".into()));
        }
        let t = data.transform();
        let mut detected_y = Vec::new();
        let mut detected_designs = Vec::new();
        let mut censored = Vec::new();
        let mut buf = vec![0.0; k];
        for i in 0..data.n() {
            let x = data.x_row(i);
            if data.delta()[i] {
                layout.fill(x, data.z(i), &mut buf);
                detected_designs.extend_from_slice(&buf);
                detected_y.push(data.y()[i]);
            } else {
                let offset: f64 = x.iter().zip(&nuisance.alpha_hat).map(|(a, b)| a * b).sum();
                let (pts, ms) = nuisance.eta_hat.restricted_jumps(data.c() - offset, nuisance.tau);
                let mut designs = Vec::with_capacity(pts.len() * k);
                for &tk in pts {
                    layout.fill(x, t.forward(tk + offset), &mut buf);
                    designs.extend_from_slice(&buf);
                }
                censored.push(CensoredSubject { y: data.y()[i], designs, log_mass: ms.iter().map(|m| m.ln()).collect() });
            }
        }
        Ok(PseudoProblem {
            family,
            phi: nuisance.phi_hat,
            k,
            n: data.n(),
            detected_y,
            detected_designs,
            censored,
        })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    /// Evaluates `pl_n(θ)`, `Ψ_n(θ)` and optionally `∂Ψ_n/∂θ'`.
    pub fn evaluate(&self, theta: &[f64], with_jacobian: bool) -> PseudoEval {
        let k = self.k;
        let fam = self.family;
        let a = fam.a(self.phi);
        let log_floor = INTEGRAL_FLOOR.ln();
        let n_det = self.detected_y.len();
        let total = n_det + self.censored.len();
        // layout of the accumulator: [loglik, floored, score(k), jacobian(k*k)]
        let dim = 2 + k + if with_jacobian { k * k } else { 0 };
        let acc = par::chunked_sum(total, dim, |i, acc| {
            if i < n_det {
                let d = &self.detected_designs[i * k..(i + 1) * k];
                let y = self.detected_y[i];
                let w: f64 = d.iter().zip(theta).map(|(u, v)| u * v).sum();
                acc[0] += fam.log_density_w(y, w, self.phi);
                let r = y - fam.b_dot(w);
                for j in 0..k {
                    acc[2 + j] += r * d[j];
                }
                if with_jacobian {
                    let v = fam.b_ddot(w);
                    for r_ in 0..k {
                        for s in 0..k {
                            acc[2 + k + r_ * k + s] -= v * d[r_] * d[s];
                        }
                    }
                }
            } else {
                let sub = &self.censored[i - n_det];
                let m = sub.log_mass.len();
                let ws: Vec<f64> = (0..m)
                    .map(|q| sub.designs[q * k..(q + 1) * k].iter().zip(theta).map(|(u, v)| u * v).sum())
                    .collect();
                let log_terms: Vec<f64> =
                    ws.iter().zip(&sub.log_mass).map(|(&w, lm)| fam.log_density_w(sub.y, w, self.phi) + lm).collect();
                let (log_s, weights) = normalize_log(&log_terms);
                if !(log_s >= log_floor) {
                    acc[0] += log_floor;
                    acc[1] += 1.0;
                    return;
                }
                acc[0] += log_s;
                let mut gbar = vec![0.0; k];
                let mut second = if with_jacobian { vec![0.0; k * k] } else { Vec::new() };
                for q in 0..m {
                    let d = &sub.designs[q * k..(q + 1) * k];
                    let wq = weights[q];
                    let r = sub.y - fam.b_dot(ws[q]);
                    for j in 0..k {
                        gbar[j] += wq * r * d[j];
                    }
                    if with_jacobian {
                        let v = fam.b_ddot(ws[q]);
                        for r_ in 0..k {
                            for s in 0..k {
                                second[r_ * k + s] += wq * (r * r * d[r_] * d[s] / a - v * d[r_] * d[s]);
                            }
                        }
                    }
                }
                for j in 0..k {
                    acc[2 + j] += gbar[j];
                }
                if with_jacobian {
                    for r_ in 0..k {
                        for s in 0..k {
                            acc[2 + k + r_ * k + s] += second[r_ * k + s] - gbar[r_] * gbar[s] / a;
                        }
                    }
                }
            }
        });
        let n = self.n as f64;
        let jacobian = with_jacobian.then(|| DMatrix::from_fn(k, k, |r, s| acc[2 + k + r * k + s] / n));
        PseudoEval {
            loglik: acc[0] / n,
            score: acc[2..2 + k].iter().map(|v| v / n).collect(),
            jacobian,
            floored: acc[1] as usize,
        }
    }
}

/// `pl_n(θ)`.
pub fn pseudo_loglik(theta: &[f64], data: &ObservationSet, nuisance: &NuisanceBundle, family: GlmFamily) -> Result<f64> {
    Ok(PseudoProblem::new(data, nuisance, family)?.evaluate(theta, false).loglik)
}

/// `Ψ_n(θ)`, the estimating function.
pub fn pseudo_score(theta: &[f64], data: &ObservationSet, nuisance: &NuisanceBundle, family: GlmFamily) -> Result<Vec<f64>> {
    Ok(PseudoProblem::new(data, nuisance, family)?.evaluate(theta, false).score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoFitResult {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub floored_subjects: usize,
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    max / min
}

/// Solves `Ψ_n(θ) = 0` by damped Newton from `init`.
pub fn solve_pseudo(data: &ObservationSet, nuisance: &NuisanceBundle, family: GlmFamily, init: &[f64]) -> Result<PseudoFitResult> {
    let problem = PseudoProblem::new(data, nuisance, family)?;
    solve_problem(&problem, init)
}

pub fn solve_problem(problem: &PseudoProblem, init: &[f64]) -> Result<PseudoFitResult> {
    let k = problem.dim();
    if init.len() != k {
        return Err(Error::Validation(format!("start value has length {}, expected {k}", init.len())));
    }
    let mut theta = init.to_vec();
    let mut ev = problem.evaluate(&theta, true);
    let mut iterations = 0;
    loop {
        let norm = sup_norm(&ev.score);
        if !norm.is_finite() || !ev.loglik.is_finite() {
            return Err(Error::Numeric("pseudo-likelihood is not finite at the current iterate".into()));
        }
        if norm <= SCORE_TOL {
            if ev.floored > 0 {
                log::warn!("{} censored subjects hit the integral floor {INTEGRAL_FLOOR:e}", ev.floored);
            }
            return Ok(PseudoFitResult { theta, converged: true, iterations, score_norm: norm, floored_subjects: ev.floored });
        }
        if iterations >= MAX_ITER {
            return Err(Error::NonConvergence { iterations, score_norm: norm, last: theta });
        }
        iterations += 1;
        let jac = ev.jacobian.take().expect("jacobian requested");
        let psi = DVector::from_vec(ev.score.clone());
        let newton = jac.clone().lu().solve(&(-&psi));
        let mut dir: Vec<f64> = match newton {
            Some(step) if step.iter().all(|v| v.is_finite()) => step.iter().copied().collect(),
            _ => {
                return Err(Error::Singular(format!(
                    "pseudo-score Jacobian is singular (condition number {:.3e})",
                    condition_number(&jac)
                )))
            }
        };
        let ascent: f64 = dir.iter().zip(&ev.score).map(|(a, b)| a * b).sum();
        if ascent <= 0.0 {
            // Jacobian not negative definite here: fall back to a scaled gradient step.
            let scale = (0..k).map(|j| jac[(j, j)].abs()).fold(0.0, f64::max).max(1e-8);
            dir = ev.score.iter().map(|s| s / scale).collect();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let cev = problem.evaluate(&cand, true);
            let ok = cev.loglik.is_finite()
                && (cev.loglik > ev.loglik || sup_norm(&cev.score) < norm)
                && cev.loglik >= ev.loglik - 1e-10 * ev.loglik.abs().max(1.0);
            if ok {
                accepted = Some((cand, cev));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, cev)) => {
                theta = cand;
                ev = cev;
            }
            None => return Err(Error::NonConvergence { iterations, score_norm: norm, last: theta }),
        }
    }
}

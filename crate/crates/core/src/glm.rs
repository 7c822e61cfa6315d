//! Exponential dispersion families under the canonical link, and the damped
//! Newton fitter used for complete-case, full-data and substitution fits.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::data::ObservationSet;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Canonical-link family: density `exp{(y w - b(w)) / a(phi) + c(y, phi)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GlmFamily {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl std::str::FromStr for GlmFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "normal" => Ok(GlmFamily::Gaussian),
            "bernoulli" | "logistic" | "binomial" => Ok(GlmFamily::Bernoulli),
            "poisson" => Ok(GlmFamily::Poisson),
            other => Err(Error::Usage(format!("unknown family `{other}`"))),
        }
    }
}

impl std::fmt::Display for GlmFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GlmFamily::Gaussian => "gaussian",
            GlmFamily::Bernoulli => "bernoulli",
            GlmFamily::Poisson => "poisson",
        })
    }
}

impl GlmFamily {
    #[inline]
    pub fn a(self, phi: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => phi,
            _ => 1.0,
        }
    }

    /// Cumulant function `b(w)`.
    #[inline]
    pub fn b(self, w: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 0.5 * w * w,
            // log(1 + e^w) without overflow
            GlmFamily::Bernoulli => w.max(0.0) + (-w.abs()).exp().ln_1p(),
            GlmFamily::Poisson => w.exp(),
        }
    }

    /// Mean function `ḃ(w)`.
    #[inline]
    pub fn b_dot(self, w: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => w,
            GlmFamily::Bernoulli => {
                if w >= 0.0 {
                    1.0 / (1.0 + (-w).exp())
                } else {
                    let e = w.exp();
                    e / (1.0 + e)
                }
            }
            GlmFamily::Poisson => w.exp(),
        }
    }

    /// Variance function `b̈(w)`.
    #[inline]
    pub fn b_ddot(self, w: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Bernoulli => {
                let m = self.b_dot(w);
                m * (1.0 - m)
            }
            GlmFamily::Poisson => w.exp(),
        }
    }

    /// `c(y, phi)`.
    pub fn c(self, y: f64, phi: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => -0.5 * y * y / phi - 0.5 * (LN_2PI + phi.ln()),
            GlmFamily::Bernoulli => 0.0,
            GlmFamily::Poisson => -ln_gamma(y + 1.0),
        }
    }

    /// Log density at natural parameter `w`.
    #[inline]
    pub fn log_density_w(self, y: f64, w: f64, phi: f64) -> f64 {
        (y * w - self.b(w)) / self.a(phi) + self.c(y, phi)
    }

    /// `y w - b(w)`: the θ-dependent kernel of the log density.
    #[inline]
    pub fn kernel(self, y: f64, w: f64) -> f64 {
        y * w - self.b(w)
    }

    /// Canonical link `g = ḃ⁻¹`.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => mu,
            GlmFamily::Bernoulli => (mu / (1.0 - mu)).ln(),
            GlmFamily::Poisson => mu.ln(),
        }
    }

    pub fn has_dispersion(self) -> bool {
        matches!(self, GlmFamily::Gaussian)
    }
}

/// Log density `f(y | t, x)` with `D(t) = (1, x', h(t))'`.
pub fn log_density(
    y: f64,
    t: f64,
    x: &[f64],
    theta: &[f64],
    phi: f64,
    family: GlmFamily,
    transform: crate::data::Transformation,
) -> Result<f64> {
    let layout = crate::data::Layout { p: x.len() };
    if theta.len() != layout.dim() {
        return Err(Error::Validation(format!("theta has length {}, expected {}", theta.len(), layout.dim())));
    }
    let w = layout.linear_predictor(x, transform.forward(t), theta);
    if !w.is_finite() || (family == GlmFamily::Poisson && w > 700.0) {
        return Err(Error::Numeric(format!("linear predictor {w} out of range")));
    }
    Ok(family.log_density_w(y, w, phi))
}

/// Result of a GLM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub theta: Vec<f64>,
    pub phi: f64,
    pub n_used: usize,
    pub converged: bool,
    pub iterations: usize,
}

pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;

/// Score `Σ (y - ḃ(D'θ)) D` and Hessian `-Σ b̈(D'θ) D D'` over row-major designs.
pub fn score_and_hessian(theta: &[f64], design: &[f64], y: &[f64], family: GlmFamily) -> (Vec<f64>, DMatrix<f64>) {
    let k = theta.len();
    let mut score = vec![0.0; k];
    let mut hess = DMatrix::<f64>::zeros(k, k);
    for (i, &yi) in y.iter().enumerate() {
        let d = &design[i * k..(i + 1) * k];
        let w: f64 = d.iter().zip(theta).map(|(a, b)| a * b).sum();
        let r = yi - family.b_dot(w);
        let v = family.b_ddot(w);
        for a in 0..k {
            score[a] += r * d[a];
            for b in 0..=a {
                hess[(a, b)] -= v * d[a] * d[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            hess[(b, a)] = hess[(a, b)];
        }
    }
    (score, hess)
}

fn kernel_sum(theta: &[f64], design: &[f64], y: &[f64], family: GlmFamily) -> f64 {
    let k = theta.len();
    y.iter()
        .enumerate()
        .map(|(i, &yi)| {
            let w: f64 = design[i * k..(i + 1) * k].iter().zip(theta).map(|(a, b)| a * b).sum();
            family.kernel(yi, w)
        })
        .sum()
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Rejects designs whose column-scaled Gram matrix is numerically singular.
fn check_rank(design: &[f64], k: usize, n: usize) -> Result<()> {
    let mut gram = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let d = &design[i * k..(i + 1) * k];
        for r in 0..k {
            for s in 0..=r {
                gram[(r, s)] += d[r] * d[s];
            }
        }
    }
    let scale: Vec<f64> = (0..k).map(|r| gram[(r, r)].sqrt()).collect();
    if scale.iter().any(|&v| v == 0.0) {
        return Err(Error::Singular("design has an all-zero column".into()));
    }
    for r in 0..k {
        for s in 0..=r {
            gram[(r, s)] /= scale[r] * scale[s];
            gram[(s, r)] = gram[(r, s)];
        }
    }
    let eig = gram.symmetric_eigenvalues();
    let max = eig.iter().copied().fold(0.0, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 1e-12 * max {
        return Err(Error::Singular(format!("design is rank deficient (condition number {:.3e})", max / min.max(0.0))));
    }
    Ok(())
}

/// Fits a canonical-link GLM to a row-major `n × k` design by damped Newton.
pub fn fit_glm(design: &[f64], k: usize, y: &[f64], family: GlmFamily) -> Result<GlmFit> {
    let n = y.len();
    if design.len() != n * k {
        return Err(Error::Validation("design/response size mismatch".into()));
    }
    if n <= k {
        return Err(Error::Estimation(format!("{n} rows cannot identify {k} coefficients")));
    }
    check_rank(design, k, n)?;
    let mut theta = vec![0.0; k];
    let ybar = y.iter().sum::<f64>() / n as f64;
    let start = match family {
        GlmFamily::Bernoulli => family.link(ybar.clamp(1e-3, 1.0 - 1e-3)),
        GlmFamily::Poisson => family.link(ybar.max(1e-3)),
        GlmFamily::Gaussian => ybar,
    };
    // Only sensible when column 0 is the intercept, which every caller uses.
    theta[0] = start;

    let mut obj = kernel_sum(&theta, design, y, family);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < NEWTON_MAX_ITER {
        let (score, hess) = score_and_hessian(&theta, design, y, family);
        if sup_norm(&score) <= NEWTON_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let info = -hess;
        let step = info
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&DVector::from_vec(score.clone())))
            .ok_or_else(|| Error::Singular("information matrix is not positive definite (rank-deficient design?)".into()))?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let cobj = kernel_sum(&cand, design, y, family);
            if cobj.is_finite() && cobj >= obj - 1e-12 * obj.abs().max(1.0) {
                theta = cand;
                obj = cobj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        let (score, _) = score_and_hessian(&theta, design, y, family);
        let norm = sup_norm(&score);
        if norm <= NEWTON_TOL {
            converged = true;
        } else {
            return Err(Error::NonConvergence { iterations, score_norm: norm, last: theta });
        }
    }
    let phi = match family {
        GlmFamily::Gaussian => {
            let rss: f64 = y
                .iter()
                .enumerate()
                .map(|(i, &yi)| {
                    let w: f64 = design[i * k..(i + 1) * k].iter().zip(&theta).map(|(a, b)| a * b).sum();
                    (yi - w).powi(2)
                })
                .sum();
            rss / (n - k) as f64
        }
        _ => 1.0,
    };
    Ok(GlmFit { theta, phi, n_used: n, converged, iterations })
}

/// Row-major design and responses of the detected rows, with `z = h(v)`.
pub fn complete_case_design(data: &ObservationSet) -> (Vec<f64>, Vec<f64>) {
    let layout = data.layout();
    let k = layout.dim();
    let idx = data.detected_indices();
    let mut design = vec![0.0; idx.len() * k];
    let mut y = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        layout.fill(data.x_row(i), data.z(i), &mut design[r * k..(r + 1) * k]);
        y.push(data.y()[i]);
    }
    (design, y)
}

/// Complete-case GLM fit on rows with the covariate detected.
pub fn fit_complete_case(data: &ObservationSet, family: GlmFamily) -> Result<GlmFit> {
    let k = data.layout().dim();
    let n1 = data.n_detected();
    if n1 < data.p() + 3 {
        return Err(Error::Estimation(format!("only {n1} detected rows; need at least {}", data.p() + 3)));
    }
    let (design, y) = complete_case_design(data);
    fit_glm(&design, k, &y, family)
}

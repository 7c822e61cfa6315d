#![allow(dead_code)]

use lodreg::data::ObservationSet;
use lodreg::glm::GlmFamily;
use lodreg::sim::{generate_dataset, SimDataset, SimScenario};
use statrs::function::gamma::ln_gamma;

/// Transformed limit giving about 30% censoring under the standard design.
pub const C_30: f64 = 0.4345;

pub fn scenario(family: GlmFamily, n: usize, seed: u64) -> SimScenario {
    let mut s = SimScenario::standard(family);
    s.n = n;
    s.seed = seed;
    s
}

pub fn dataset(family: GlmFamily, n: usize, seed: u64, c: f64) -> SimDataset {
    generate_dataset(&scenario(family, n, seed), c, 0).unwrap()
}

pub fn observed(family: GlmFamily, n: usize, seed: u64) -> ObservationSet {
    dataset(family, n, seed, C_30).observed
}

/// Log density written out per family, independent of the library's GLM code.
pub fn log_density_direct(family: GlmFamily, y: f64, w: f64, phi: f64) -> f64 {
    match family {
        GlmFamily::Gaussian => -(y - w).powi(2) / (2.0 * phi) - 0.5 * (2.0 * std::f64::consts::PI * phi).ln(),
        GlmFamily::Bernoulli => y * w - (1.0 + w.exp()).ln(),
        GlmFamily::Poisson => y * w - w.exp() - ln_gamma(y + 1.0),
    }
}

pub fn linear_predictor(x: &[f64], z: f64, theta: &[f64]) -> f64 {
    let p = x.len();
    theta[0] + x.iter().zip(&theta[1..=p]).map(|(a, b)| a * b).sum::<f64>() + theta[p + 1] * z
}

pub const FAMILIES: [GlmFamily; 3] = [GlmFamily::Gaussian, GlmFamily::Bernoulli, GlmFamily::Poisson];

/// `1 - Π_{e_i ≤ t} (1 - (Δ_i/n) / H(e_i))` with `H(s)` the fraction of residuals `≥ s`.
pub fn product_limit_oracle(e: &[f64], delta: &[bool], t: f64) -> f64 {
    let n = e.len() as f64;
    let mut prod = 1.0;
    for i in 0..e.len() {
        if e[i] <= t && delta[i] {
            let h = e.iter().filter(|&&s| s >= e[i]).count() as f64 / n;
            prod *= 1.0 - (1.0 / n) / h;
        }
    }
    1.0 - prod
}

//! Rank-based (Gehan) estimation of the slope coefficients in the accelerated
//! failure time model `T = X'α + ς` for the transformed covariate.
//!
//! The AFT intercept is not estimated; it stays inside the residuals and is
//! carried by the residual distribution.
//!
//! The Gehan loss
//!
//! ```text
//! G(α) = n⁻² Σ_i Σ_j Δ_i max(e_j(α) - e_i(α), 0),   e_k(α) = V_k - X_k'α
//! ```
//!
//! is convex and piecewise linear. It is minimized by ε-steepest descent:
//! the search direction is the negative minimum-norm element of an
//! ε-enlarged subdifferential, followed by an exact line search. ε shrinks
//! geometrically until it reaches round-off scale.

use nalgebra::{DMatrix, DVector};

use crate::data::ObservationSet;
use crate::error::{Error, Result};

/// Fitted AFT slopes with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct AftFit {
    pub alpha: Vec<f64>,
    /// `e_i = V_i - X_i'α̂` for every row (censored rows use `V_i = C`).
    pub residuals: Vec<f64>,
    pub gehan_objective: f64,
    /// Norm of the minimum-norm ε-subgradient at termination.
    pub subgradient_norm: f64,
    pub iterations: usize,
}

pub const IMPROVEMENT_TOL: f64 = 1e-10;
const MAX_ITER: usize = 2000;
const MAX_ACTIVE: usize = 4000;
const MIN_NORM_TOL: f64 = 1e-13;

pub fn residuals(alpha: &[f64], data: &ObservationSet) -> Vec<f64> {
    (0..data.n())
        .map(|i| data.v()[i] - data.x_row(i).iter().zip(alpha).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn sorted_order(e: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..e.len()).collect();
    idx.sort_unstable_by(|&a, &b| e[a].total_cmp(&e[b]).then(a.cmp(&b)));
    idx
}

fn objective_from_residuals(e: &[f64], delta: &[bool]) -> f64 {
    let n = e.len();
    let order = sorted_order(e);
    let mut suffix = 0.0;
    let mut total = 0.0;
    for r in (0..n).rev() {
        let i = order[r];
        suffix += e[i];
        if delta[i] {
            total += suffix - e[i] * (n - r) as f64;
        }
    }
    total / (n * n) as f64
}

/// Gehan loss `n⁻² Σ_i Σ_j Δ_i max(e_j - e_i, 0)`.
pub fn gehan_objective(alpha: &[f64], data: &ObservationSet) -> f64 {
    objective_from_residuals(&residuals(alpha, data), data.delta())
}

/// Gradient of the loss with the tie convention `1{e_i ≤ e_j}`:
/// `n⁻² Σ_i Σ_j Δ_i (X_i - X_j) 1{e_i ≤ e_j}`.
fn gradient_from_residuals(e: &[f64], data: &ObservationSet) -> Vec<f64> {
    let n = e.len();
    let p = data.p();
    let order = sorted_order(e);
    // suffix sums of X over sorted positions
    let mut suffix_x = vec![0.0; (n + 1) * p];
    for r in (0..n).rev() {
        let xi = data.x_row(order[r]);
        for j in 0..p {
            suffix_x[r * p + j] = suffix_x[(r + 1) * p + j] + xi[j];
        }
    }
    let mut g = vec![0.0; p];
    let mut r = 0;
    while r < n {
        let mut end = r + 1;
        while end < n && e[order[end]] == e[order[r]] {
            end += 1;
        }
        let count = (n - r) as f64;
        for &i in &order[r..end] {
            if data.delta()[i] {
                let xi = data.x_row(i);
                for j in 0..p {
                    g[j] += xi[j] * count - suffix_x[r * p + j];
                }
            }
        }
        r = end;
    }
    let scale = 1.0 / (n * n) as f64;
    g.iter_mut().for_each(|a| *a *= scale);
    g
}

/// Subgradient of [`gehan_objective`] at `alpha`; the gradient wherever the loss is smooth.
pub fn gehan_subgradient(alpha: &[f64], data: &ObservationSet) -> Vec<f64> {
    gradient_from_residuals(&residuals(alpha, data), data)
}

/// Base vector and active pair directions of the ε-subdifferential, unscaled by n⁻².
fn eps_subdifferential(e: &[f64], data: &ObservationSet, eps: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = e.len();
    let p = data.p();
    let order = sorted_order(e);
    let sorted: Vec<f64> = order.iter().map(|&i| e[i]).collect();
    let mut suffix_x = vec![0.0; (n + 1) * p];
    for r in (0..n).rev() {
        let xi = data.x_row(order[r]);
        for j in 0..p {
            suffix_x[r * p + j] = suffix_x[(r + 1) * p + j] + xi[j];
        }
    }
    let mut base = vec![0.0; p];
    let mut active = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if !data.delta()[i] {
            continue;
        }
        let ei = e[i];
        let xi = data.x_row(i);
        let first_above = sorted.partition_point(|&s| s <= ei + eps);
        let count = (n - first_above) as f64;
        for j in 0..p {
            base[j] += xi[j] * count - suffix_x[first_above * p + j];
        }
        let lo = sorted.partition_point(|&s| s < ei - eps);
        for (q, &k) in order.iter().enumerate().take(first_above).skip(lo) {
            if q == pos {
                continue;
            }
            let a: Vec<f64> = xi.iter().zip(data.x_row(k)).map(|(u, v)| u - v).collect();
            if a.iter().any(|v| v.abs() > 1e-14) {
                active.push(a);
            }
        }
    }
    (base, active)
}

/// Minimum-norm point of `{base + Σ λ_k a_k : λ ∈ [0,1]^m}` by cyclic coordinate descent.
fn min_norm_point(base: &[f64], active: &[Vec<f64>]) -> Vec<f64> {
    let m = active.len();
    let mut lambda = vec![0.5; m];
    let mut g = base.to_vec();
    for (a, l) in active.iter().zip(&lambda) {
        g.iter_mut().zip(a).for_each(|(gi, ai)| *gi += l * ai);
    }
    let sq: Vec<f64> = active.iter().map(|a| a.iter().map(|v| v * v).sum()).collect();
    let scale = base.iter().chain(active.iter().flatten()).fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    for _ in 0..5000 {
        let mut moved = 0.0f64;
        for k in 0..m {
            let dot: f64 = g.iter().zip(&active[k]).map(|(u, v)| u * v).sum();
            let new = (lambda[k] - dot / sq[k]).clamp(0.0, 1.0);
            let step = new - lambda[k];
            if step != 0.0 {
                g.iter_mut().zip(&active[k]).for_each(|(gi, ai)| *gi += step * ai);
                lambda[k] = new;
                moved = moved.max(step.abs() * sq[k].sqrt());
            }
        }
        if moved <= 1e-15 * scale {
            break;
        }
    }
    g
}

fn directional_slope(e: &[f64], c: &[f64], s: f64, data: &ObservationSet) -> (f64, Vec<f64>) {
    let es: Vec<f64> = e.iter().zip(c).map(|(a, b)| a - s * b).collect();
    // d/ds G(α + s d) with e(s) = e - s c: n⁻² Σ Δ_i Σ_{e_j(s) ≥ e_i(s)} (c_i - c_j)
    let n = es.len();
    let order = sorted_order(&es);
    let mut suffix_c = 0.0;
    let mut slope = 0.0;
    for r in (0..n).rev() {
        let i = order[r];
        suffix_c += c[i];
        if data.delta()[i] {
            slope += c[i] * (n - r) as f64 - suffix_c;
        }
    }
    (slope / (n * n) as f64, es)
}

/// Exact minimization of the convex piecewise-linear loss along `e - s c`, `s ≥ 0`.
fn line_search(e: &[f64], c: &[f64], data: &ObservationSet, s0: f64) -> (f64, f64) {
    let f0 = objective_from_residuals(e, data.delta());
    let mut lo = 0.0;
    let mut hi = s0;
    let mut grown = 0;
    loop {
        let (slope, _) = directional_slope(e, c, hi, data);
        if slope >= 0.0 {
            break;
        }
        lo = hi;
        hi *= 2.0;
        grown += 1;
        if grown > 200 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let (slope, _) = directional_slope(e, c, mid, data);
        if slope < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut best = (0.0, f0);
    for s in [lo, hi] {
        let es: Vec<f64> = e.iter().zip(c).map(|(a, b)| a - s * b).collect();
        let f = objective_from_residuals(&es, data.delta());
        if f < best.1 {
            best = (s, f);
        }
    }
    best
}

/// Least-squares slopes of `V` on `X` (with intercept) over detected rows.
pub fn least_squares_init(data: &ObservationSet) -> Result<Vec<f64>> {
    let p = data.p();
    let idx = data.detected_indices();
    if idx.len() < p + 1 {
        return Err(Error::Estimation("too few detected rows for the AFT start value".into()));
    }
    let mut a = DMatrix::<f64>::zeros(idx.len(), p + 1);
    let mut b = DVector::<f64>::zeros(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        a[(r, 0)] = 1.0;
        for (j, xj) in data.x_row(i).iter().enumerate() {
            a[(r, j + 1)] = *xj;
        }
        b[r] = data.v()[i];
    }
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    let sol = ata
        .cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| Error::Singular("AFT start value: detected covariates are collinear".into()))?;
    Ok(sol.iter().skip(1).copied().collect())
}

fn spread(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Minimizes the Gehan loss starting from `init`.
pub fn fit_gehan(data: &ObservationSet, init: &[f64]) -> Result<AftFit> {
    let p = data.p();
    if init.len() != p {
        return Err(Error::Validation(format!("AFT start value has length {}, expected {p}", init.len())));
    }
    if data.n_detected() < 2 {
        return Err(Error::Estimation("fewer than two detected observations; the AFT slopes are not identified".into()));
    }
    for j in 0..p {
        let col = data.x_col(j);
        if col.iter().all(|&a| a == col[0]) {
            return Err(Error::Validation(format!("covariate `{}` is constant", data.x_names()[j])));
        }
    }
    let n2 = (data.n() * data.n()) as f64;
    let mut alpha = init.to_vec();
    let mut e = residuals(&alpha, data);
    let mut f = objective_from_residuals(&e, data.delta());
    if p == 0 {
        return Ok(AftFit { alpha, residuals: e, gehan_objective: f, subgradient_norm: 0.0, iterations: 0 });
    }
    let scale = spread(&e).max(1e-8);
    let eps_min = 1e-12 * scale;
    let mut eps = 1e-3 * scale;
    let mut iterations = 0;
    let mut gnorm;
    loop {
        if iterations >= MAX_ITER {
            return Err(Error::NonConvergence { iterations, score_norm: f64::NAN, last: alpha });
        }
        iterations += 1;
        let (base, active) = eps_subdifferential(&e, data, eps);
        if active.len() > MAX_ACTIVE && eps > eps_min {
            eps = (eps * 0.1).max(eps_min);
            continue;
        }
        let g = min_norm_point(&base, &active);
        gnorm = g.iter().map(|a| a * a).sum::<f64>().sqrt() / n2;
        if gnorm <= MIN_NORM_TOL {
            if eps <= eps_min {
                break;
            }
            eps = (eps * 0.1).max(eps_min);
            continue;
        }
        let norm = gnorm * n2;
        let d: Vec<f64> = g.iter().map(|a| -a / norm).collect();
        let c: Vec<f64> = (0..data.n()).map(|i| data.x_row(i).iter().zip(&d).map(|(a, b)| a * b).sum()).collect();
        let s0 = (eps / c.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1e-300)).max(1e-3 * scale);
        let (s, fnew) = line_search(&e, &c, data, s0);
        let improvement = f - fnew;
        if improvement > 0.0 {
            alpha.iter_mut().zip(&d).for_each(|(a, di)| *a += s * di);
            e = residuals(&alpha, data);
            f = objective_from_residuals(&e, data.delta());
        }
        if improvement < IMPROVEMENT_TOL {
            if eps <= eps_min {
                break;
            }
            eps = (eps * 0.1).max(eps_min);
        }
    }
    Ok(AftFit { alpha, residuals: e, gehan_objective: f, subgradient_norm: gnorm, iterations })
}

/// [`fit_gehan`] started from [`least_squares_init`].
pub fn fit_gehan_default(data: &ObservationSet) -> Result<AftFit> {
    let init = least_squares_init(data)?;
    fit_gehan(data, &init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// The points (x, v) = (0, 0) and (1, 1), each listed twice.
    fn pure_two_point() -> ObservationSet {
        ObservationSet::new(vec![0.0; 4], vec![0.0, 1.0, 0.0, 1.0], 1, vec![0.0, 1.0, 0.0, 1.0], vec![true; 4], 5.0).unwrap()
    }

    #[test]
    fn two_point_loss_is_abs() {
        // duplicated two-point data: every pairwise term is doubled, n² is quadrupled
        let d = pure_two_point();
        for a in [-1.0, 0.0, 0.5, 1.0, 2.5] {
            let got = gehan_objective(&[a], &d);
            assert!((got - (1.0f64 - a).abs() / 4.0).abs() < 1e-15, "{a}: {got}");
        }
        let g = gehan_subgradient(&[0.0], &d);
        assert!((g[0] + 0.25).abs() < 1e-15);
        let fit = fit_gehan(&d, &[0.0]).unwrap();
        assert!((fit.alpha[0] - 1.0).abs() < 1e-9, "{:?}", fit.alpha);
    }

    #[test]
    fn all_censored_subgradient_is_zero() {
        let d = ObservationSet::new(vec![0.0; 4], vec![0.0, 1.0, 2.0, 3.0], 1, vec![1.0; 4], vec![false; 4], 1.0).unwrap();
        assert_eq!(gehan_subgradient(&[0.3], &d), vec![0.0]);
        assert!(fit_gehan(&d, &[0.0]).is_err());
    }

    #[test]
    fn equal_residuals_give_zero_loss() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let v: Vec<f64> = x.iter().map(|a| 0.3 + 0.7 * a).collect();
        let d = ObservationSet::new(vec![0.0; 4], x, 1, v, vec![true; 4], 10.0).unwrap();
        assert!(gehan_objective(&[0.7], &d).abs() < 1e-15);
    }

    pub(crate) fn synthetic(n: usize, seed: u64, censor_frac: f64) -> ObservationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut t = Vec::new();
        for _ in 0..n {
            let x1 = f64::from(rng.random_bool(0.5) as u8);
            let x2: f64 = 1.0 + rng.sample::<f64, _>(StandardNormal);
            let err: f64 = 0.3 * rng.sample::<f64, _>(StandardNormal);
            x.extend([x1, x2]);
            t.push(0.25 + 0.25 * x1 - 0.5 * x2 + err);
        }
        let mut sorted = t.clone();
        sorted.sort_by(f64::total_cmp);
        let c = sorted[((1.0 - censor_frac) * (n as f64 - 1.0)).round() as usize] + 1e-9;
        let delta: Vec<bool> = t.iter().map(|&a| a <= c).collect();
        let v: Vec<f64> = t.iter().map(|&a| a.min(c)).collect();
        ObservationSet::new(vec![0.0; n], x, 2, v, delta, c).unwrap()
    }

    #[test]
    fn fit_matches_grid_oracle_n20() {
        for seed in 0..3 {
            let d = synthetic(20, 100 + seed, 0.3);
            let fit = fit_gehan_default(&d).unwrap();
            // coarse-to-fine brute-force grid over [α̂ ± 0.5]², final resolution 1e-3
            let mut best = (f64::INFINITY, [0.0, 0.0]);
            let mut centre = [fit.alpha[0], fit.alpha[1]];
            let mut half: f64 = 0.5;
            for step in [0.01f64, 1e-3] {
                let m = (half / step).round() as i64;
                for a in -m..=m {
                    for b in -m..=m {
                        let al = [centre[0] + a as f64 * step, centre[1] + b as f64 * step];
                        let f = gehan_objective(&al, &d);
                        if f < best.0 {
                            best = (f, al);
                        }
                    }
                }
                centre = best.1;
                half = 2.0 * step;
            }
            assert!(fit.gehan_objective <= best.0 + 1e-12, "seed {seed}: {} > grid {}", fit.gehan_objective, best.0);
            // Lipschitz bound of the loss times the grid resolution
            let lip: f64 = 2.0 * d.x_flat().iter().fold(0.0f64, |m, a| m.max(a.abs()));
            assert!(best.0 - fit.gehan_objective <= lip * 1e-3 * 2.0);
        }
    }

    #[test]
    fn fit_is_local_minimum() {
        let d = synthetic(80, 7, 0.3);
        let fit = fit_gehan_default(&d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let al = [fit.alpha[0] + 0.1 * u.cos(), fit.alpha[1] + 0.1 * u.sin()];
            assert!(gehan_objective(&al, &d) >= fit.gehan_objective - 1e-14);
        }
        assert!(fit.gehan_objective >= 0.0);
    }

    #[test]
    fn location_invariance() {
        let d = synthetic(60, 8, 0.3);
        let shifted = ObservationSet::new(
            d.y().to_vec(),
            d.x_flat().to_vec(),
            2,
            d.v().iter().map(|a| a + 3.0).collect(),
            d.delta().to_vec(),
            d.c() + 3.0,
        )
        .unwrap();
        let a = fit_gehan_default(&d).unwrap();
        let b = fit_gehan_default(&shifted).unwrap();
        for (u, v) in a.alpha.iter().zip(&b.alpha) {
            assert!((u - v).abs() < 1e-7, "{u} vs {v}");
        }
        assert!((a.gehan_objective - b.gehan_objective).abs() < 1e-10);
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let d = synthetic(40, 9, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let al = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let g = gehan_subgradient(&al, &d);
            for j in 0..2 {
                let h = 1e-7;
                let mut ap = al;
                let mut am = al;
                ap[j] += h;
                am[j] -= h;
                let fd = (gehan_objective(&ap, &d) - gehan_objective(&am, &d)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-6, "{fd} vs {}", g[j]);
            }
        }
    }
}

//! Martingale-residual score processes for checking the AFT model.
//!
//! For covariate `j` the observed process is
//! `W(x) = n^{-1/2} Σ_i 1(X_ij ≤ x) M̂_i`, and its null distribution is
//! approximated by multiplier paths built from independent standard normal multipliers `G_i`, corrected for
//! the estimation of the residual hazard and of the AFT slopes.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::aft::AftFit;
use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Purpose};

/// `M̂_i = Δ_i - Λ̂(e_i)` with the Nelson–Aalen cumulative hazard of the residuals.
pub fn martingale_residuals(residuals: &[f64], delta: &[bool]) -> Vec<f64> {
    let n = residuals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| residuals[a].total_cmp(&residuals[b]));
    let mut out = vec![0.0; n];
    let mut hazard = 0.0;
    let mut r = 0;
    while r < n {
        let u = residuals[order[r]];
        let mut end = r + 1;
        while end < n && residuals[order[end]] == u {
            end += 1;
        }
        let events = order[r..end].iter().filter(|&&i| delta[i]).count();
        hazard += events as f64 / (n - r) as f64;
        for &i in &order[r..end] {
            out[i] = f64::from(delta[i] as u8) - hazard;
        }
        r = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreProcess {
    pub covariate_index: usize,
    pub covariate_name: String,
    /// Distinct observed covariate values, ascending.
    pub eval_points: Vec<f64>,
    pub observed_path: Vec<f64>,
    /// `n_sim` rows, one per multiplier replicate.
    pub simulated_paths: Vec<Vec<f64>>,
    pub p_value: f64,
}

impl ScoreProcess {
    pub fn n_sim(&self) -> usize {
        self.simulated_paths.len()
    }
    pub fn observed_sup(&self) -> f64 {
        sup_abs(&self.observed_path)
    }
}

fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Cumulative sums of `values` over subjects sorted by covariate, read at each distinct value.
fn cumulative_path(sorted_subjects: &[usize], groups: &[usize], values: &[f64], scale: f64) -> Vec<f64> {
    let mut path = Vec::with_capacity(groups.len());
    let mut acc = 0.0;
    let mut start = 0;
    for &end in groups {
        for &i in &sorted_subjects[start..end] {
            acc += values[i];
        }
        path.push(acc * scale);
        start = end;
    }
    path
}

/// Observed and simulated score processes for covariate `covariate_index`,
/// for an AFT fit that uses every covariate of `data`.
pub fn score_process(
    data: &ObservationSet,
    fit: &AftFit,
    covariate_index: usize,
    n_sim: usize,
    seed: u64,
) -> Result<ScoreProcess> {
    let all: Vec<usize> = (0..data.p()).collect();
    score_process_with_model(data, &all, fit, covariate_index, n_sim, seed)
}

/// As [`score_process`], for a fit on the columns `model_columns` of `data`.
///
/// Each simulated path is
/// `n^{-1/2} Σ_i G_i ∫ [1(X_ij ≤ x) - Ē_x(t)] dM̂_i(t) - η̂(x)' Â⁻¹ Σ_i G_i û_i`,
/// where `Ē_x(t)` is the at-risk fraction with `X_j ≤ x`, `û_i` is the
/// martingale form of subject i's Gehan score and `Â`, `η̂(x)` are central
/// differences of the Gehan score and of `W(x)` in α with step
/// `sd(e) / (sd(X_k) √n)`. The first term accounts for estimating Λ and the
/// second for estimating α, so simulated paths are tied down at the largest
/// `x` like the observed one.
pub fn score_process_with_model(
    data: &ObservationSet,
    model_columns: &[usize],
    fit: &AftFit,
    covariate_index: usize,
    n_sim: usize,
    seed: u64,
) -> Result<ScoreProcess> {
    let n = data.n();
    if covariate_index >= data.p() {
        return Err(Error::Config(format!("covariate index {covariate_index} out of range (p={})", data.p())));
    }
    if model_columns.len() != fit.alpha.len() || model_columns.iter().any(|&c| c >= data.p()) {
        return Err(Error::Config(format!(
            "model columns {model_columns:?} do not match a fit with {} slopes on p={} covariates",
            fit.alpha.len(),
            data.p()
        )));
    }
    if fit.residuals.len() != n {
        return Err(Error::Validation("AFT fit does not belong to this dataset".into()));
    }
    let xcol = data.x_col(covariate_index);
    if xcol.iter().all(|&a| a == xcol[0]) {
        return Err(Error::Estimation(format!(
            "covariate `{}` is constant; its score process is degenerate",
            data.x_names()[covariate_index]
        )));
    }
    let e = &fit.residuals;
    let delta = data.delta();
    let mres = martingale_residuals(e, delta);

    let mut by_x: Vec<usize> = (0..n).collect();
    by_x.sort_by(|&a, &b| xcol[a].total_cmp(&xcol[b]).then(mres[a].total_cmp(&mres[b])));
    let mut eval_points = Vec::new();
    let mut groups = Vec::new();
    for (pos, &i) in by_x.iter().enumerate() {
        if pos + 1 == n || xcol[by_x[pos + 1]] != xcol[i] {
            eval_points.push(xcol[i]);
            groups.push(pos + 1);
        }
    }
    let scale = 1.0 / (n as f64).sqrt();
    let observed_path = cumulative_path(&by_x, &groups, &mres, scale);

    // Canonical subject order: by residual, then Δ, x and y. It fixes the
    // multiplier assignment and every summation order, so the result does
    // not depend on row order in the input.
    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&a, &b| {
        e[a].total_cmp(&e[b])
            .then(delta[a].cmp(&delta[b]))
            .then_with(|| {
                data.x_row(a)
                    .iter()
                    .zip(data.x_row(b))
                    .map(|(u, v)| u.total_cmp(v))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(data.y()[a].total_cmp(&data.y()[b]))
    });
    let q = model_columns.len();
    let xm: Vec<f64> = (0..n).flat_map(|i| model_columns.iter().map(move |&c| data.x_row(i)[c])).collect();
    let risk = RiskSets::new(&canonical, e, delta);

    let u_hat = risk.gehan_influence(&xm, q);
    let (a_inv, eta) = if q == 0 {
        (DMatrix::zeros(0, 0), Vec::new())
    } else {
        let sd_e = std_dev(e.iter().copied());
        let mut a_mat = DMatrix::zeros(q, q);
        let mut eta = Vec::with_capacity(q);
        for k in 0..q {
            let sd_x = std_dev((0..n).map(|i| xm[i * q + k]));
            if !(sd_x > 0.0 && sd_e > 0.0) {
                return Err(Error::Estimation(format!(
                    "model covariate `{}` or the residuals have no spread",
                    data.x_names()[model_columns[k]]
                )));
            }
            let h = sd_e / (sd_x * (n as f64).sqrt());
            let shifted = |sign: f64| -> Vec<f64> { (0..n).map(|i| e[i] - sign * h * xm[i * q + k]).collect() };
            let (plus, minus) = (shifted(1.0), shifted(-1.0));
            let up = gehan_score(&plus, delta, &xm, q, &canonical);
            let um = gehan_score(&minus, delta, &xm, q, &canonical);
            for j in 0..q {
                a_mat[(j, k)] = (up[j] - um[j]) / (2.0 * h);
            }
            let wp = cumulative_path(&by_x, &groups, &martingale_residuals(&plus, delta), scale);
            let wm = cumulative_path(&by_x, &groups, &martingale_residuals(&minus, delta), scale);
            eta.push(wp.iter().zip(&wm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
        }
        let a_inv = a_mat
            .try_inverse()
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Estimation("Gehan score slope matrix is singular".into()))?;
        (a_inv, eta)
    };

    let simulated_paths: Vec<Vec<f64>> = par::map_indexed(n_sim, |s| {
        let mut rng = rng::stream(seed, Purpose::Multiplier, s as u64);
        let mut g = vec![0.0; n];
        for &i in &canonical {
            g[i] = StandardNormal.sample(&mut rng);
        }
        let a = risk.perturbed_martingale(&g);
        let mut path = cumulative_path(&by_x, &groups, &a, scale);
        if q > 0 {
            let mut gu = DVector::zeros(q);
            for &i in &canonical {
                for j in 0..q {
                    gu[j] += g[i] * u_hat[i * q + j];
                }
            }
            let v = &a_inv * gu;
            for (k, eta_k) in eta.iter().enumerate() {
                for (p, d) in path.iter_mut().zip(eta_k) {
                    *p -= d * v[k];
                }
            }
        }
        path
    });
    let obs_sup = sup_abs(&observed_path);
    let exceed = simulated_paths.iter().filter(|p| sup_abs(p) >= obs_sup).count();
    Ok(ScoreProcess {
        covariate_index,
        covariate_name: data.x_names()[covariate_index].clone(),
        eval_points,
        observed_path,
        simulated_paths,
        p_value: (1 + exceed) as f64 / (n_sim + 1) as f64,
    })
}

fn std_dev(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, s) = v.clone().fold((0.0, 0.0), |(n, s), a| (n + 1.0, s + a));
    let m = s / n;
    (v.map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Tied-residual groups along a residual-sorted subject order.
struct RiskSets<'a> {
    order: &'a [usize],
    delta: &'a [bool],
    /// `(start, end)` positions of each group of equal residuals.
    groups: Vec<(usize, usize)>,
}

impl<'a> RiskSets<'a> {
    fn new(order: &'a [usize], e: &[f64], delta: &'a [bool]) -> Self {
        let n = order.len();
        let mut groups = Vec::new();
        let mut r = 0;
        while r < n {
            let mut end = r + 1;
            while end < n && e[order[end]] == e[order[r]] {
                end += 1;
            }
            groups.push((r, end));
            r = end;
        }
        RiskSets { order, delta, groups }
    }

    fn events(&self, start: usize, end: usize) -> usize {
        self.order[start..end].iter().filter(|&&i| self.delta[i]).count()
    }

    /// Weights `a_m` with `Σ_m 1(X_m ≤ x) a_m = Σ_i G_i ∫ [1(X_i ≤ x) - Ē_x(t)] dM̂_i(t)`:
    /// `a_m = G_m M̂_m - Σ_{t ≤ e_m} (Σ_{events at t} G_i)/R(t) + Σ_{t ≤ e_m} dΛ̂(t) S_G(t)/R(t)`
    /// with `S_G(t)` the sum of `G` over the risk set.
    fn perturbed_martingale(&self, g: &[f64]) -> Vec<f64> {
        let n = self.order.len();
        let mut suffix = vec![0.0; n + 1];
        for r in (0..n).rev() {
            suffix[r] = suffix[r + 1] + g[self.order[r]];
        }
        let mut out = vec![0.0; n];
        let (mut hazard, mut c, mut d) = (0.0, 0.0, 0.0);
        for &(start, end) in &self.groups {
            let at_risk = (n - start) as f64;
            let events = self.events(start, end) as f64;
            let dl = events / at_risk;
            hazard += dl;
            c += self.order[start..end].iter().filter(|&&i| self.delta[i]).map(|&i| g[i]).sum::<f64>() / at_risk;
            d += dl * suffix[start] / at_risk;
            for &i in &self.order[start..end] {
                out[i] = g[i] * (f64::from(self.delta[i] as u8) - hazard) - c + d;
            }
        }
        out
    }

    /// Martingale-form Gehan score per subject, `n × q` row-major:
    /// `û_i = ∫ w(t) [X_i - X̄(t)] dM̂_i(t)` with `w(t) = R(t)/n`.
    fn gehan_influence(&self, xm: &[f64], q: usize) -> Vec<f64> {
        let n = self.order.len();
        let mut suffix = vec![0.0; (n + 1) * q];
        for r in (0..n).rev() {
            let i = self.order[r];
            for j in 0..q {
                suffix[r * q + j] = suffix[(r + 1) * q + j] + xm[i * q + j];
            }
        }
        let mut out = vec![0.0; n * q];
        let mut a1 = 0.0;
        let mut a2 = vec![0.0; q];
        for &(start, end) in &self.groups {
            let at_risk = (n - start) as f64;
            let w = at_risk / n as f64;
            let dl = self.events(start, end) as f64 / at_risk;
            let xbar: Vec<f64> = (0..q).map(|j| suffix[start * q + j] / at_risk).collect();
            a1 += dl * w;
            for j in 0..q {
                a2[j] += dl * w * xbar[j];
            }
            for &i in &self.order[start..end] {
                let ev = if self.delta[i] { w } else { 0.0 };
                for j in 0..q {
                    let x = xm[i * q + j];
                    out[i * q + j] = ev * (x - xbar[j]) - (x * a1 - a2[j]);
                }
            }
        }
        out
    }
}

/// Gehan score `n⁻¹ Σ_i Σ_j Δ_i (X_i - X_j) 1(e_i ≤ e_j)` on the model columns.
fn gehan_score(e: &[f64], delta: &[bool], xm: &[f64], q: usize, canonical: &[usize]) -> Vec<f64> {
    let n = e.len();
    let mut order = canonical.to_vec();
    order.sort_by(|&a, &b| e[a].total_cmp(&e[b]));
    let risk = RiskSets::new(&order, e, delta);
    let mut suffix = vec![0.0; q];
    let mut u = vec![0.0; q];
    for &(start, end) in risk.groups.iter().rev() {
        for &i in &order[start..end] {
            for j in 0..q {
                suffix[j] += xm[i * q + j];
            }
        }
        let count = (n - start) as f64;
        for &i in order[start..end].iter().filter(|&&i| delta[i]) {
            for j in 0..q {
                u[j] += xm[i * q + j] * count - suffix[j];
            }
        }
    }
    u.iter().map(|a| a / n as f64).collect()
}

/// Plot-ready table: `x`, `observed`, then `sim_1..sim_{n_paths}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlotTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.header)?;
        for r in &self.rows {
            wr.write_record(r.iter().map(|v| v.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn export_gof_plot_data(process: &ScoreProcess, n_paths: usize) -> Result<PlotTable> {
    if n_paths > process.n_sim() {
        return Err(Error::Config(format!("asked for {n_paths} paths but only {} were simulated", process.n_sim())));
    }
    let mut header = vec!["x".to_string(), "observed".to_string()];
    header.extend((1..=n_paths).map(|s| format!("sim_{s}")));
    let rows = (0..process.eval_points.len())
        .map(|q| {
            let mut row = vec![process.eval_points[q], process.observed_path[q]];
            row.extend(process.simulated_paths[..n_paths].iter().map(|p| p[q]));
            row
        })
        .collect();
    Ok(PlotTable { header, rows })
}

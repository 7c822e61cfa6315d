mod common;

use approx::assert_relative_eq;
use common::{log_density_direct, observed, product_limit_oracle, FAMILIES};
use lodreg::aft::fit_gehan_default;
use lodreg::glm::{fit_complete_case, GlmFamily};
use lodreg::km::{km_fit, StepDistribution};
use lodreg::pipeline::{fit_nuisance, fit_two_stage, TwoStageOptions};
use lodreg::pseudo::{
    censored_weights, pseudo_loglik, pseudo_score, solve_pseudo, NuisanceBundle, PseudoProblem, INTEGRAL_FLOOR,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nuisance_for(family: GlmFamily, seed: u64) -> (lodreg::data::ObservationSet, NuisanceBundle, Vec<f64>) {
    let data = observed(family, 120, seed);
    let cc = fit_complete_case(&data, family).unwrap();
    let (_, nuisance) = fit_nuisance(&data, &cc, TwoStageOptions::default()).unwrap();
    (data, nuisance, cc.theta)
}

#[test]
fn km_matches_product_formula() {
    for seed in 0..5 {
        let data = observed(GlmFamily::Gaussian, 150, 40 + seed);
        let fit = fit_gehan_default(&data).unwrap();
        let km = km_fit(&fit.residuals, data.delta()).unwrap();
        let (lo, hi) = fit.residuals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let t = rng.random_range(lo - 0.1..hi + 0.1);
            let oracle = product_limit_oracle(&fit.residuals, data.delta(), t);
            assert!((km.cdf(t) - oracle).abs() <= 1e-12, "t={t}: {} vs {oracle}", km.cdf(t));
        }
        for &t in km.jump_points() {
            assert!((km.cdf(t) - product_limit_oracle(&fit.residuals, data.delta(), t)).abs() <= 1e-12);
        }
    }
}

/// Pseudo-log-likelihood evaluated term by term from the product-formula KM.
fn direct_pl(data: &lodreg::data::ObservationSet, nu: &NuisanceBundle, family: GlmFamily, theta: &[f64]) -> f64 {
    let n = data.n();
    let e: Vec<f64> = (0..n)
        .map(|i| data.v()[i] - data.x_row(i).iter().zip(&nu.alpha_hat).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let mut jumps: Vec<f64> = (0..n).filter(|&i| data.delta()[i]).map(|i| e[i]).collect();
    jumps.sort_by(f64::total_cmp);
    jumps.dedup();
    let mut prev = 0.0;
    let masses: Vec<f64> = jumps
        .iter()
        .map(|&t| {
            let f = product_limit_oracle(&e, data.delta(), t);
            let m = f - prev;
            prev = f;
            m
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let x = data.x_row(i);
        if data.delta()[i] {
            let w = common::linear_predictor(x, data.z(i), theta);
            total += log_density_direct(family, data.y()[i], w, nu.phi_hat);
        } else {
            let off: f64 = x.iter().zip(&nu.alpha_hat).map(|(a, b)| a * b).sum();
            let mut s = 0.0;
            for (t, m) in jumps.iter().zip(&masses) {
                if *t > data.c() - off && *t <= nu.tau {
                    let w = common::linear_predictor(x, (-(t + off)).exp(), theta);
                    s += log_density_direct(family, data.y()[i], w, nu.phi_hat).exp() * m;
                }
            }
            total += s.max(INTEGRAL_FLOOR).ln();
        }
    }
    total / n as f64
}

#[test]
fn loglik_matches_direct_evaluation() {
    for fam in FAMILIES {
        let (data, nu, theta0) = nuisance_for(fam, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let theta: Vec<f64> = theta0.iter().map(|t| t + rng.random_range(-0.3..0.3)).collect();
            let got = pseudo_loglik(&theta, &data, &nu, fam).unwrap();
            let want = direct_pl(&data, &nu, fam, &theta);
            assert!((got - want).abs() <= 1e-10, "{fam}: {got} vs {want}");
        }
    }
}

fn fd_gradient(problem: &PseudoProblem, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|j| {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[j] += h;
            m[j] -= h;
            (problem.evaluate(&p, false).loglik - problem.evaluate(&m, false).loglik) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    num / den
}

#[test]
fn score_is_scaled_gradient_of_loglik() {
    for fam in FAMILIES {
        let (data, nu, theta0) = nuisance_for(fam, 21);
        let problem = PseudoProblem::new(&data, &nu, fam).unwrap();
        let a = fam.a(nu.phi_hat);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let theta: Vec<f64> = theta0.iter().map(|t| t + rng.random_range(-0.5..0.5)).collect();
            let psi: Vec<f64> = problem.evaluate(&theta, false).score.iter().map(|s| s / a).collect();
            let fd = fd_gradient(&problem, &theta, 1e-5);
            let err = rel_err(&fd, &psi);
            assert!(err <= 1e-6, "{fam}: relative error {err:e}");
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    for fam in FAMILIES {
        let (data, nu, theta0) = nuisance_for(fam, 22);
        let problem = PseudoProblem::new(&data, &nu, fam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let theta: Vec<f64> = theta0.iter().map(|t| t + rng.random_range(-0.3..0.3)).collect();
            let jac = problem.evaluate(&theta, true).jacobian.unwrap();
            let k = theta.len();
            for s in 0..k {
                let h = 1e-6;
                let mut p = theta.clone();
                let mut m = theta.clone();
                p[s] += h;
                m[s] -= h;
                let sp = problem.evaluate(&p, false).score;
                let sm = problem.evaluate(&m, false).score;
                for r in 0..k {
                    let fd = (sp[r] - sm[r]) / (2.0 * h);
                    assert!((fd - jac[(r, s)]).abs() <= 1e-6 * jac[(r, s)].abs().max(1.0), "{fam} ({r},{s}): {fd} vs {}", jac[(r, s)]);
                }
            }
        }
    }
}

#[test]
fn jacobian_negative_definite_and_local_max_at_solution() {
    for fam in FAMILIES {
        let (data, nu, theta0) = nuisance_for(fam, 23);
        let fit = solve_pseudo(&data, &nu, fam, &theta0).unwrap();
        assert!(fit.converged && fit.score_norm <= 1e-8);
        let problem = PseudoProblem::new(&data, &nu, fam).unwrap();
        let ev = problem.evaluate(&fit.theta, true);
        let jac = ev.jacobian.unwrap();
        let sym = (&jac + jac.transpose()) * 0.5;
        assert!(sym.symmetric_eigenvalues().iter().all(|&e| e < 0.0), "{fam}: {}", sym.symmetric_eigenvalues());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let dir: Vec<f64> = (0..fit.theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let moved: Vec<f64> = fit.theta.iter().zip(&dir).map(|(t, d)| t + 1e-2 * d).collect();
            assert!(problem.evaluate(&moved, false).loglik < ev.loglik);
        }
    }
}

#[test]
fn weights_and_score_invariant_to_mass_rescaling() {
    for fam in FAMILIES {
        let (data, nu, theta) = nuisance_for(fam, 31);
        let factor = 0.37;
        let scaled = NuisanceBundle { eta_hat: nu.eta_hat.scaled_masses(factor), ..nu.clone() };
        for i in (0..data.n()).filter(|&i| !data.delta()[i]) {
            let a = censored_weights(data.x_row(i), data.y()[i], &theta, &nu, fam, data.c());
            let b = censored_weights(data.x_row(i), data.y()[i], &theta, &scaled, fam, data.c());
            assert_eq!(a.points, b.points);
            for (u, v) in a.weights.iter().zip(&b.weights) {
                assert!((u - v).abs() <= 1e-12);
            }
            if a.log_integral.is_finite() {
                assert_relative_eq!(b.log_integral - a.log_integral, factor.ln(), epsilon = 1e-10);
            }
        }
        let s1 = pseudo_score(&theta, &data, &nu, fam).unwrap();
        let s2 = pseudo_score(&theta, &data, &scaled, fam).unwrap();
        for (u, v) in s1.iter().zip(&s2) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }
}

#[test]
fn no_censoring_reduces_to_full_data_fit() {
    for fam in FAMILIES {
        for seed in 0..20 {
            let ds = common::dataset(fam, 150, 500 + seed, 1e9);
            assert_eq!(ds.observed.n_detected(), 150);
            let full = lodreg::baselines::FilledDataset::from_latent(&ds.observed, &ds.latent_z).unwrap().fit(fam).unwrap();
            let two = fit_two_stage(&ds.observed, fam, TwoStageOptions::default()).unwrap();
            assert_eq!(two.pseudo.floored_subjects, 0);
            for (a, b) in two.theta().iter().zip(&full.theta) {
                assert!((a - b).abs() <= 1e-8, "{fam} seed {seed}: {a} vs {b}");
            }
            let problem = PseudoProblem::new(&ds.observed, &two.nuisance, fam).unwrap();
            let ll = problem.evaluate(&full.theta, false).loglik;
            let direct: f64 = (0..150)
                .map(|i| log_density_direct(fam, ds.observed.y()[i], common::linear_predictor(ds.observed.x_row(i), ds.latent_z[i], &full.theta), two.nuisance.phi_hat))
                .sum::<f64>()
                / 150.0;
            assert_relative_eq!(ll, direct, max_relative = 1e-12);
        }
    }
}

#[test]
fn estimate_is_stable_under_mass_perturbation() {
    let fam = GlmFamily::Gaussian;
    let (data, nu, theta0) = nuisance_for(fam, 41);
    let base = solve_pseudo(&data, &nu, fam, &theta0).unwrap();
    let eta = &nu.eta_hat;
    let total = eta.total_mass();
    for drop in [0, eta.len() / 3, eta.len() / 2] {
        let mut pts = eta.jump_points().to_vec();
        let mut ms = eta.masses().to_vec();
        pts.remove(drop);
        ms.remove(drop);
        let kept: f64 = ms.iter().sum();
        ms.iter_mut().for_each(|m| *m *= total / kept);
        let change: f64 = eta.masses()[drop]
            + eta.masses().iter().enumerate().filter(|&(k, _)| k != drop).map(|(_, m)| m * (total / kept - 1.0)).sum::<f64>();
        let perturbed = NuisanceBundle { eta_hat: StepDistribution::from_jumps(pts, ms).unwrap(), ..nu.clone() };
        let fit = solve_pseudo(&data, &perturbed, fam, &theta0).unwrap();
        let d: f64 = fit.theta.iter().zip(&base.theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d <= 10.0 * change, "drop {drop}: moved {d}, mass change {change}");
    }
}

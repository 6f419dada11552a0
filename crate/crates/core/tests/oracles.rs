mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;

use toscca_mm::lme::{build_design, mean_trajectory, LambdaMode, LmeProblem, TimeBasis};
use toscca_mm::scca::{canonical_correlation, nipals_pair, NipalsOptions, WeightUpdate};

fn ls_options(p: usize, q: usize) -> NipalsOptions {
    NipalsOptions {
        tol: 1e-13,
        max_iter: 1000,
        update: WeightUpdate::Regression { ridge: 0.0 },
        ..NipalsOptions::full(p, q)
    }
}

#[test]
fn nipals_matches_eigen_cca() {
    for seed in 0..5 {
        let (x, y) = cca_instance(200, 5, 4, seed);
        let (rho, a, b) = cca_oracle(&x, &y);
        let fit = nipals_pair(x.view(), y.view(), &ls_options(5, 4)).unwrap();
        assert!(fit.converged);
        assert!((fit.rho - rho).abs() < 1e-6, "seed {seed}: {} vs {rho}", fit.rho);
        assert!(cosine(&fit.weights.w_x, &a).abs() > 1.0 - 1e-6);
        assert!(cosine(&fit.weights.w_y, &b).abs() > 1.0 - 1e-6);
    }
}

#[test]
fn identical_views_give_unit_correlation() {
    let (x, _) = cca_instance(60, 6, 2, 9);
    let fit = nipals_pair(x.view(), x.view(), &NipalsOptions::full(6, 6)).unwrap();
    assert!((fit.rho - 1.0).abs() < 1e-8);
}

#[test]
fn pure_noise_rho_below_permutation_null() {
    let mut r = rng(17);
    let (n, p, q) = (80, 6, 5);
    let x = center_scale(&ndarray::Array2::from_shape_fn((n, p), |_| normal(&mut r)));
    let y = center_scale(&ndarray::Array2::from_shape_fn((n, q), |_| normal(&mut r)));
    let opts = NipalsOptions {
        px: 3,
        qy: 3,
        ..NipalsOptions::full(p, q)
    };
    let observed = nipals_pair(x.view(), y.view(), &opts).unwrap().rho.abs();
    let mut null = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..200 {
        perm.shuffle(&mut r);
        let yp = y.select(ndarray::Axis(0), &perm);
        null.push(nipals_pair(x.view(), yp.view(), &opts).unwrap().rho.abs());
    }
    null.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q95 = null[189];
    assert!(observed < q95, "observed {observed} vs null 95% {q95}");
}

#[test]
fn correlation_matches_textbook_formula() {
    let mut r = rng(3);
    for _ in 0..20 {
        let a: Vec<f64> = (0..37).map(|_| normal(&mut r)).collect();
        let b: Vec<f64> = (0..37).map(|_| normal(&mut r) + 0.3 * a[0]).collect();
        let got = canonical_correlation(Array1::from(a.clone()).view(), Array1::from(b.clone()).view()).unwrap();
        assert!((got - pearson(&a, &b)).abs() < 1e-12);
    }
}

/// Explicit marginal-covariance GLS: `V = s2 (I + lambda J)` per subject.
fn gls_oracle(design: &DMatrix<f64>, y: &DVector<f64>, ids: &[String], lambda: f64) -> DVector<f64> {
    let n = y.len();
    let mut v = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if ids[i] == ids[j] {
                v[(i, j)] += lambda;
            }
        }
    }
    let vinv = v.try_inverse().unwrap();
    let xtv = design.transpose() * &vinv;
    (&xtv * design).try_inverse().unwrap() * (&xtv * y)
}

fn explicit_loglik(design: &DMatrix<f64>, y: &DVector<f64>, ids: &[String], lambda: f64) -> f64 {
    let n = y.len();
    let beta = gls_oracle(design, y, ids, lambda);
    let mut v = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if ids[i] == ids[j] {
                v[(i, j)] += lambda;
            }
        }
    }
    let res = y - design * beta;
    let logdet = v.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
    let q = (res.transpose() * v.try_inverse().unwrap() * &res)[(0, 0)];
    let s2 = q / n as f64;
    let nf = n as f64;
    -0.5 * (nf * (2.0 * std::f64::consts::PI).ln() + nf * s2.ln() + logdet + nf)
}

fn to_na(times: &[f64], y: &[f64], basis: &TimeBasis) -> (DMatrix<f64>, DVector<f64>) {
    let d = build_design(basis, times);
    (
        DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d[[i, j]]),
        DVector::from_column_slice(y),
    )
}

#[test]
fn lme_fixed_effects_match_explicit_gls() {
    let basis = TimeBasis::linear();
    for seed in 0..3 {
        let (ids, times, y) = lme_data(20, 5, &[1.0, -0.5], 1.0, 0.5, seed);
        let prob = LmeProblem::new(basis, &ids, &times).unwrap();
        let fit = prob.fit(&y, LambdaMode::Profiled).unwrap();
        let (d, yv) = to_na(&times, &y, &basis);
        let beta = gls_oracle(&d, &yv, &ids, fit.lambda);
        for (a, b) in fit.fixed_effects.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        // BLUPs from the closed-form shrinkage formula.
        let res = &yv - &d * &beta;
        for i in 0..20 {
            let id = format!("s{i}");
            let rows: Vec<usize> = (0..ids.len()).filter(|&r| ids[r] == id).collect();
            let m = rows.len() as f64;
            let mean = rows.iter().map(|&r| res[r]).sum::<f64>() / m;
            let want = fit.lambda * m / (1.0 + fit.lambda * m) * mean;
            assert!((fit.blup(&id) - want).abs() < 1e-8);
            assert!(fit.blup(&id).abs() <= mean.abs() + 1e-15);
        }
    }
}

#[test]
fn lme_unbalanced_polynomial_matches_gls_at_fixed_lambda() {
    let basis = TimeBasis::polynomial(3);
    let (ids, times, y) = lme_data(15, 6, &[0.5, 0.2, -0.1, 0.02], 0.8, 0.3, 11);
    let keep: Vec<usize> = (0..ids.len()).filter(|r| r % 7 != 3).collect();
    let ids: Vec<String> = keep.iter().map(|&r| ids[r].clone()).collect();
    let times: Vec<f64> = keep.iter().map(|&r| times[r]).collect();
    let y: Vec<f64> = keep.iter().map(|&r| y[r]).collect();
    let prob = LmeProblem::new(basis, &ids, &times).unwrap();
    let (d, yv) = to_na(&times, &y, &basis);
    for lambda in [0.0, 0.3, 5.0] {
        let fit = prob.fit(&y, LambdaMode::Fixed(lambda)).unwrap();
        let beta = gls_oracle(&d, &yv, &ids, lambda);
        for (a, b) in fit.fixed_effects.iter().zip(beta.iter()) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "lambda {lambda}: {a} vs {b}");
        }
    }
}

#[test]
fn profiled_loglik_matches_explicit_and_is_maximal() {
    let basis = TimeBasis::linear();
    let (ids, times, y) = lme_data(20, 5, &[0.0, 1.0], 0.7, 0.5, 5);
    let prob = LmeProblem::new(basis, &ids, &times).unwrap();
    let fit = prob.fit(&y, LambdaMode::Profiled).unwrap();
    let (d, yv) = to_na(&times, &y, &basis);
    assert!((fit.loglik - explicit_loglik(&d, &yv, &ids, fit.lambda)).abs() < 1e-8);

    let mut r = rng(8);
    for _ in 0..50 {
        let lambda = 10f64.powf(r.random_range(-6.0..3.0));
        let ll = prob.profiled_loglik(&y, lambda).unwrap();
        assert!(ll <= fit.loglik + 1e-9, "lambda {lambda}: {ll} > {}", fit.loglik);
        assert!((ll - explicit_loglik(&d, &yv, &ids, lambda)).abs() < 1e-7);
    }
}

#[test]
fn zero_random_variance_reduces_to_ols() {
    let basis = TimeBasis::linear();
    let (ids, times, y) = lme_data(20, 5, &[2.0, 0.3], 0.0, 0.4, 1);
    let prob = LmeProblem::new(basis, &ids, &times).unwrap();
    let fit = prob.fit(&y, LambdaMode::Fixed(0.0)).unwrap();
    let (d, yv) = to_na(&times, &y, &basis);
    let ols = (d.transpose() * &d).try_inverse().unwrap() * d.transpose() * yv;
    for (a, b) in fit.fixed_effects.iter().zip(ols.iter()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn mean_trajectory_is_average_of_subject_predictions() {
    let basis = TimeBasis::polynomial(2);
    let (ids, times, y) = lme_data(12, 4, &[1.0, 0.5, -0.1], 1.0, 0.2, 2);
    let fit = LmeProblem::new(basis, &ids, &times).unwrap().fit(&y, LambdaMode::Profiled).unwrap();
    let subjects: Vec<String> = fit.random_intercepts.keys().cloned().collect();
    let bsum: f64 = fit.random_intercepts.values().sum();
    let grid = [-1.0, 0.0, 1.5, 3.0];
    let curve = mean_trajectory(&fit, &grid);
    for (g, c) in grid.iter().zip(&curve) {
        let avg = subjects.iter().map(|s| fit.predict_one(s, *g)).sum::<f64>() / subjects.len() as f64;
        assert!((avg - c - bsum / subjects.len() as f64).abs() < 1e-10);
        if bsum.abs() < 1e-9 {
            assert!((avg - c).abs() < 1e-10);
        }
    }
    assert!((mean_trajectory(&fit, &[0.0])[0] - fit.fixed_effects[0]).abs() < 1e-12);
}

use super::simple::{GaussianLinearModel, PoissonRegression};
use super::*;
use crate::sparse::from_triplets;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

fn dense(a: &SparseMatrix) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.rows(), a.cols());
    for (&v, (i, j)) in a.iter() {
        m[(i, j)] += v;
    }
    m
}

/// Random-walk structure plus a small ridge, observed through a sparse design.
fn gaussian_toy(seed: u64) -> GaussianLinearModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 12;
    let n = 20;
    let mut r = Vec::new();
    for i in 0..m {
        r.push((i, i, 0.1));
        if i + 1 < m {
            r.push((i, i, 1.0));
            r.push((i + 1, i + 1, 1.0));
            r.push((i, i + 1, -1.0));
            r.push((i + 1, i, -1.0));
        }
    }
    let mut z = Vec::new();
    for i in 0..n {
        let j = rng.gen_range(0..m - 1);
        let w: f64 = rng.gen();
        z.push((i, j, w));
        z.push((i, j + 1, 1.0 - w));
    }
    let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.4).sin() + rng.gen_range(-0.3..0.3)).collect();
    GaussianLinearModel::new(from_triplets(n, m, &z), y, from_triplets(m, m, &r)).unwrap()
}

/// Closed-form `log N(y; 0, Z (tau_x R)⁻¹ Zᵀ + I / tau_e)`.
fn marginal_oracle(z: &DMatrix<f64>, r: &DMatrix<f64>, y: &[f64], tau_x: f64, tau_e: f64) -> f64 {
    let n = y.len();
    let cov_x = (r * tau_x).try_inverse().unwrap();
    let cov = z * cov_x * z.transpose() + DMatrix::identity(n, n) / tau_e;
    let chol = cov.cholesky().unwrap();
    let yv = DVector::from_column_slice(y);
    let sol = chol.solve(&yv);
    let ld = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * ld - 0.5 * yv.dot(&sol)
}

#[test]
fn gaussian_toy_one_newton_step_and_exact_evidence() {
    let seed = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 12;
    let n = 20;
    let mut r = DMatrix::<f64>::identity(m, m) * 0.1;
    for i in 0..m - 1 {
        r[(i, i)] += 1.0;
        r[(i + 1, i + 1)] += 1.0;
        r[(i, i + 1)] -= 1.0;
        r[(i + 1, i)] -= 1.0;
    }
    let mut z = DMatrix::<f64>::zeros(n, m);
    for i in 0..n {
        let j = rng.gen_range(0..m - 1);
        let w: f64 = rng.gen();
        z[(i, j)] += w;
        z[(i, j + 1)] += 1.0 - w;
    }
    let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.4).sin() + rng.gen_range(-0.3..0.3)).collect();
    let model = gaussian_toy(seed);

    for theta in [[0.0, 0.0], [1.3, -0.4], [-2.0, 2.5]] {
        let (tx, te) = (f64::exp(theta[0]), f64::exp(theta[1]));
        let (lp, approx) = hyper_log_posterior(&model, &theta, None, &NewtonConfig::default()).unwrap();
        assert!(approx.iterations <= 1, "iterations {}", approx.iterations);
        let prec = z.transpose() * &z * te + &r * tx;
        let gls = prec.clone().cholesky().unwrap().solve(&(z.transpose() * DVector::from_column_slice(&y) * te));
        for i in 0..m {
            assert!((approx.mode[i] - gls[i]).abs() < 1e-10);
        }
        let want = marginal_oracle(&z, &r, &y, tx, te);
        assert!((lp - want).abs() < 1e-8, "{lp} vs {want}");
    }
}

#[test]
fn poisson_mode_matches_grid_search() {
    let z = from_triplets(
        5,
        2,
        &[(0, 0, 1.0), (0, 1, -1.0), (1, 0, 1.0), (1, 1, -0.5), (2, 0, 1.0), (3, 0, 1.0), (3, 1, 0.5), (4, 0, 1.0), (4, 1, 1.0)],
    );
    let y = vec![2.0, 3.0, 6.0, 4.0, 11.0];
    let model = PoissonRegression::new(z.clone(), y.clone(), 0.5).unwrap();
    let (_, approx) = hyper_log_posterior(&model, &[], None, &NewtonConfig::default()).unwrap();

    let zd = dense(&z);
    let f = |a: f64, b: f64| {
        let mut lp = -0.25 * (a * a + b * b);
        for i in 0..5 {
            let eta = zd[(i, 0)] * a + zd[(i, 1)] * b;
            lp += y[i] * eta - eta.exp();
        }
        lp
    };
    let (mut ca, mut cb, mut half) = (0.0, 0.0, 4.0);
    for _ in 0..8 {
        let mut best = (f64::NEG_INFINITY, ca, cb);
        for i in 0..=100 {
            for j in 0..=100 {
                let a = ca - half + 2.0 * half * i as f64 / 100.0;
                let b = cb - half + 2.0 * half * j as f64 / 100.0;
                let v = f(a, b);
                if v > best.0 {
                    best = (v, a, b);
                }
            }
        }
        ca = best.1;
        cb = best.2;
        half *= 0.1;
    }
    assert!((approx.mode[0] - ca).abs() < 1e-4 && (approx.mode[1] - cb).abs() < 1e-4);
    assert!(approx.gradient_trace.last().unwrap() < &1e-8);
}

#[test]
fn warm_start_at_mode_is_idempotent() {
    let model = gaussian_toy(1);
    let cfg = NewtonConfig::default();
    let (_, a) = hyper_log_posterior(&model, &[0.5, 0.5], None, &cfg).unwrap();
    let (_, b) = hyper_log_posterior(&model, &[0.5, 0.5], Some(&a.mode), &cfg).unwrap();
    assert!(b.iterations <= 1);
}

#[test]
fn evaluation_is_deterministic() {
    let model = gaussian_toy(2);
    let cfg = NewtonConfig::default();
    let a = hyper_log_posterior(&model, &[0.1, 0.2], None, &cfg).unwrap().0;
    let b = hyper_log_posterior(&model, &[0.1, 0.2], None, &cfg).unwrap().0;
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn finite_difference_hessian_of_quadratic() {
    let f = |x: &[f64]| Ok(-(2.0 * x[0] * x[0] + x[0] * x[1] + 3.0 * x[1] * x[1]));
    let h = finite_difference_hessian(f, &[0.3, -0.2], f(&[0.3, -0.2]).unwrap(), 0.1).unwrap();
    assert!((h[0][0] - 4.0).abs() < 1e-8);
    assert!((h[1][1] - 6.0).abs() < 1e-8);
    assert!((h[0][1] - 1.0).abs() < 1e-8);
}

#[test]
fn star_design_reproduces_gaussian_moments() {
    let hess = vec![vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 0.5], vec![0.0, 0.5, 2.0]];
    let mode = [0.5, -1.0, 2.0];
    let (pts, w) = ccd_design(&mode, &hess, 1.1);
    assert_eq!(pts.len(), 7);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // with Gaussian log posterior, weight ∝ w_k exp(lp_k - lp* + δ²/2) = w_k
    let cov = DMatrix::from_fn(3, 3, |i, j| hess[i][j]).try_inverse().unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let m2: f64 = pts.iter().zip(&w).map(|(p, w)| w * (p[i] - mode[i]) * (p[j] - mode[j])).sum();
            assert!((m2 - cov[(i, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn fit_is_reproducible_and_weights_normalised() {
    let model = gaussian_toy(4).with_hyper_prior(0.1);
    let cfg = FitConfig {
        n_samples: 500,
        ..Default::default()
    };
    let a = fit(&model, &cfg).unwrap();
    let b = fit(&model, &cfg).unwrap();
    assert_eq!(a.summaries, b.summaries);
    assert!((a.design.iter().map(|p| p.weight).sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(a.design.len(), 5);
    for s in &a.summaries {
        assert!(s.q025 <= s.q50 && s.q50 <= s.q975);
    }
}

#[test]
fn samples_agree_with_summaries() {
    let model = gaussian_toy(5).with_hyper_prior(0.1);
    let cfg = FitConfig {
        n_samples: 10_000,
        ..Default::default()
    };
    let f = fit(&model, &cfg).unwrap();
    let s = sample_posterior(&f, 10_000, 99).unwrap();
    assert_eq!(s.latent.len(), 10_000);
    let again = sample_posterior(&f, 10_000, 99).unwrap();
    assert_eq!(s.latent[17], again.latent[17]);
    for (k, summ) in f.summaries.iter().enumerate() {
        let draws: Vec<f64> = s.latent.iter().map(|x| x[k]).collect();
        let other = ParamSummary::from_draws("x", &draws);
        let se = summ.sd / (10_000f64).sqrt();
        assert!((other.mean - summ.mean).abs() < 5.0 * se * 2f64.sqrt());
        // mixture tails converge slowly; allow a few tail standard errors
        assert!((other.q025 - summ.q025).abs() < 0.3 * summ.sd);
        assert!((other.q975 - summ.q975).abs() < 0.3 * summ.sd);
    }
}

#[test]
fn monte_carlo_error_shrinks_like_root_n() {
    let model = gaussian_toy(6).with_hyper_prior(0.1);
    let f = fit(
        &model,
        &FitConfig {
            n_samples: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let spread = |n: usize| {
        let means: Vec<f64> = (0..20)
            .map(|seed| {
                let mut acc = 0.0;
                for_each_sample(&f, n, 1000 + seed, |_, x| {
                    acc += x[3];
                    Ok(())
                })
                .unwrap();
                acc / n as f64
            })
            .collect();
        ParamSummary::from_draws("m", &means).sd
    };
    let ratio = spread(100) / spread(1600);
    assert!(ratio > 2.0 && ratio < 8.0, "ratio {ratio}");
}

#[test]
fn zero_dimensional_fit() {
    let z = from_triplets(3, 1, &[(0, 0, 1.0), (1, 0, 1.0), (2, 0, 1.0)]);
    let model = PoissonRegression::new(z, vec![1.0, 2.0, 3.0], 1.0).unwrap();
    let f = fit(&model, &FitConfig::default()).unwrap();
    assert_eq!(f.design.len(), 1);
    assert_eq!(f.design[0].weight, 1.0);
    let m = f.summary("x0").unwrap().mean;
    assert!((m - f.design[0].mode[0]).abs() < 0.05);
}

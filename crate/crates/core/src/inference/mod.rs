//! Nested Laplace approximation for latent Gaussian models.
//!
//! For fixed hyperparameters `theta` the latent field is approximated by a
//! Gaussian at the conditional mode. The Laplace estimate of
//! `log p(theta | y)` is optimised with a simplex search, and the posterior
//! is integrated over a central-composite (star) design on the eigen-axes of
//! the hyperparameter Hessian.

pub mod optimize;
pub mod simple;

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{EnvelopeCholesky, EnvelopeSymbolic, SparseMatrix};
pub use optimize::{nelder_mead, SimplexConfig, SimplexResult};

/// Log density of `(y, x, theta)` as a function of the latent vector `x`
/// for fixed `theta`.
pub trait ConditionalDensity {
    /// Fully normalised `log p(y, x, theta)`.
    fn log_density(&self, x: &[f64]) -> Result<f64>;

    /// Gradient and negative Hessian with respect to `x`.
    fn gradient_hessian(&self, x: &[f64]) -> Result<(Vec<f64>, SparseMatrix)>;
}

/// A model whose latent vector is Gaussian given the hyperparameters.
pub trait LatentGaussianModel {
    type Conditional<'a>: ConditionalDensity
    where
        Self: 'a;

    fn hyper_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;

    /// Fix the hyperparameters. Points outside the support are errors.
    fn condition(&self, theta: &[f64]) -> Result<Self::Conditional<'_>>;

    /// Starting point for the inner optimisation.
    fn initial_latent(&self) -> Vec<f64>;

    /// Fill-reducing analysis of the negative Hessian pattern.
    fn symbolic(&self) -> Arc<EnvelopeSymbolic>;

    /// Names of derived quantities summarised after fitting.
    fn parameter_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn parameter_values(&self, _theta: &[f64], _x: &[f64]) -> Vec<f64> {
        Vec::new()
    }

    /// Default starting point for the hyperparameter search.
    fn default_hyper(&self) -> Vec<f64> {
        vec![0.0; self.hyper_dim()]
    }

    /// Initial simplex steps for the hyperparameters.
    fn hyper_steps(&self) -> Vec<f64> {
        vec![0.5; self.hyper_dim()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    /// Convergence threshold on the gradient 2-norm.
    pub tolerance: f64,
    /// Convergence threshold on the predicted gain `½ gᵀH⁻¹g`.
    pub decrement_tolerance: f64,
    pub max_iterations: usize,
    /// Diagonal jitter attempts, starting at 1e-8 relative and doubling.
    pub jitter_attempts: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            decrement_tolerance: 1e-10,
            max_iterations: 100,
            jitter_attempts: 6,
        }
    }
}

/// Gaussian approximation at the conditional mode.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    /// Negative Hessian at the mode.
    pub precision: SparseMatrix,
    pub factor: EnvelopeCholesky,
    /// `log p(y, x*, theta)`
    pub log_joint_at_mode: f64,
    pub iterations: usize,
    pub gradient_trace: Vec<f64>,
}

impl GaussianApprox {
    /// Laplace estimate of `log p(y, theta)`.
    pub fn laplace(&self) -> f64 {
        let d = self.mode.len() as f64;
        self.log_joint_at_mode + 0.5 * d * (2.0 * PI).ln() - 0.5 * self.factor.log_det()
    }
}

fn factorize_with_jitter(sym: &Arc<EnvelopeSymbolic>, h: &SparseMatrix, attempts: usize) -> Result<EnvelopeCholesky> {
    match EnvelopeCholesky::factorize(sym.clone(), h) {
        Ok(f) => Ok(f),
        Err(err @ Error::NotPositiveDefinite { .. }) => {
            let mut shift = 1e-8;
            for _ in 0..attempts {
                if let Ok(f) = EnvelopeCholesky::factorize_shifted(sym.clone(), h, shift) {
                    return Ok(f);
                }
                shift *= 2.0;
            }
            Err(err)
        }
        Err(e) => Err(e),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Damped Newton ascent on `log p(y, x, theta)` from `x0`.
pub fn inner_newton(
    cond: &impl ConditionalDensity,
    symbolic: &Arc<EnvelopeSymbolic>,
    x0: &[f64],
    cfg: &NewtonConfig,
) -> Result<GaussianApprox> {
    let mut x = x0.to_vec();
    let mut f = cond.log_density(&x)?;
    let mut trace = Vec::new();
    for it in 0..cfg.max_iterations {
        let (g, h) = cond.gradient_hessian(&x)?;
        let gn = norm(&g);
        trace.push(gn);
        if !gn.is_finite() {
            return Err(Error::InnerNewton {
                iterations: it,
                reason: "non-finite gradient".into(),
                trace,
            });
        }
        let factor = factorize_with_jitter(symbolic, &h, cfg.jitter_attempts)?;
        if gn < cfg.tolerance {
            return Ok(GaussianApprox {
                mode: x,
                precision: h,
                factor,
                log_joint_at_mode: f,
                iterations: it,
                gradient_trace: trace,
            });
        }
        let step = factor.solve(&g);
        let gain = 0.5 * g.iter().zip(&step).map(|(a, b)| a * b).sum::<f64>();
        if gain < cfg.decrement_tolerance {
            return Ok(GaussianApprox {
                mode: x,
                precision: h,
                factor,
                log_joint_at_mode: f,
                iterations: it,
                gradient_trace: trace,
            });
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            if let Ok(fnew) = cond.log_density(&xn) {
                if fnew >= f - 1e-12 * f.abs().max(1.0) {
                    accepted = Some((xn, fnew));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            return Err(Error::InnerNewton {
                iterations: it,
                reason: "line search failed".into(),
                trace,
            });
        };
        let moved = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        let scale = 1.0 + xn.iter().map(|v| v.abs()).fold(0.0, f64::max);
        x = xn;
        f = fnew;
        // step at the limit of floating-point resolution
        if moved < 1e-13 * scale {
            let (g, h) = cond.gradient_hessian(&x)?;
            trace.push(norm(&g));
            let factor = factorize_with_jitter(symbolic, &h, cfg.jitter_attempts)?;
            return Ok(GaussianApprox {
                mode: x,
                precision: h,
                factor,
                log_joint_at_mode: f,
                iterations: it + 1,
                gradient_trace: trace,
            });
        }
    }
    Err(Error::InnerNewton {
        iterations: cfg.max_iterations,
        reason: "iteration limit reached".into(),
        trace,
    })
}

/// Laplace approximation of `log p(theta | y)` up to the evidence constant,
/// together with the Gaussian approximation it is built on.
pub fn hyper_log_posterior<M: LatentGaussianModel>(
    model: &M,
    theta: &[f64],
    warm_start: Option<&[f64]>,
    cfg: &NewtonConfig,
) -> Result<(f64, GaussianApprox)> {
    if theta.len() != model.hyper_dim() {
        return Err(Error::invalid(format!(
            "expected {} hyperparameters, got {}",
            model.hyper_dim(),
            theta.len()
        )));
    }
    let cond = model.condition(theta)?;
    let sym = model.symbolic();
    let approx = match warm_start {
        Some(x0) => match inner_newton(&cond, &sym, x0, cfg) {
            Ok(a) => a,
            Err(_) => inner_newton(&cond, &sym, &model.initial_latent(), cfg)?,
        },
        None => inner_newton(&cond, &sym, &model.initial_latent(), cfg)?,
    };
    Ok((approx.laplace(), approx))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub newton: NewtonConfig,
    pub simplex: SimplexConfig,
    /// Starting hyperparameters; the model default when absent.
    pub start: Option<Vec<f64>>,
    /// Initial simplex steps; the model default when absent.
    pub steps: Option<Vec<f64>>,
    /// Finite-difference step for the hyperparameter Hessian.
    pub hessian_step: f64,
    /// Radius multiplier of the star design.
    pub ccd_f0: f64,
    /// Draws used for the marginal summaries.
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            newton: NewtonConfig::default(),
            simplex: SimplexConfig::default(),
            start: None,
            steps: None,
            hessian_step: 0.1,
            ccd_f0: 1.1,
            n_samples: 2000,
            seed: 1,
        }
    }
}

/// One integration point of the hyperparameter posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignPoint {
    pub theta: Vec<f64>,
    pub log_posterior: f64,
    /// Normalised integration weight.
    pub weight: f64,
    pub mode: Vec<f64>,
    #[serde(skip)]
    pub factor: Option<EnvelopeCholesky>,
}

/// Posterior summary of one scalar quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

impl ParamSummary {
    pub fn from_draws(name: impl Into<String>, draws: &[f64]) -> Self {
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            name: name.into(),
            mean,
            sd: var.sqrt(),
            q025: quantile_sorted(&sorted, 0.025),
            q50: quantile_sorted(&sorted, 0.5),
            q975: quantile_sorted(&sorted, 0.975),
        }
    }
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorFit {
    pub hyper_mode: Vec<f64>,
    pub log_posterior_at_mode: f64,
    /// Negative Hessian of the log posterior at the mode (working scale).
    pub hyper_hessian: Vec<Vec<f64>>,
    pub design: Vec<DesignPoint>,
    pub summaries: Vec<ParamSummary>,
    pub evaluations: usize,
    pub converged: bool,
}

impl PosteriorFit {
    /// Design point with the largest weight.
    pub fn central(&self) -> &DesignPoint {
        &self.design[0]
    }

    pub fn summary(&self, name: &str) -> Option<&ParamSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    /// Recompute the latent factors, e.g. after deserialisation.
    pub fn restore_factors<M: LatentGaussianModel>(&mut self, model: &M) -> Result<()> {
        let sym = model.symbolic();
        for p in &mut self.design {
            if p.factor.is_none() && p.weight > 0.0 {
                let cond = model.condition(&p.theta)?;
                let (_, h) = cond.gradient_hessian(&p.mode)?;
                p.factor = Some(factorize_with_jitter(&sym, &h, 6)?);
            }
        }
        Ok(())
    }
}

/// Negative Hessian of `f` at `x` by central differences with step `h`.
pub fn finite_difference_hessian(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], f0: f64, h: f64) -> Result<Vec<Vec<f64>>> {
    let d = x.len();
    let mut at = |delta: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, s) in delta {
            y[i] += s;
        }
        f(&y)
    };
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for i in 0..d {
        plus[i] = at(&[(i, h)])?;
        minus[i] = at(&[(i, -h)])?;
    }
    let mut hess = vec![vec![0.0; d]; d];
    for i in 0..d {
        hess[i][i] = -(plus[i] - 2.0 * f0 + minus[i]) / (h * h);
        for j in 0..i {
            let pp = at(&[(i, h), (j, h)])?;
            let mm = at(&[(i, -h), (j, -h)])?;
            let v = -(pp + mm - plus[i] - minus[i] - plus[j] - minus[j] + 2.0 * f0) / (2.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    Ok(hess)
}

/// Star design on the eigen-axes of `hess`: centre plus `±f0·√d` standard
/// deviations along each axis. Returns points and their design weights.
pub fn ccd_design(mode: &[f64], hess: &[Vec<f64>], f0: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = mode.len();
    if d == 0 {
        return (vec![Vec::new()], vec![1.0]);
    }
    let m = DMatrix::from_fn(d, d, |i, j| 0.5 * (hess[i][j] + hess[j][i]));
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let delta = f0 * (d as f64).sqrt();
    let mut points = vec![mode.to_vec()];
    let mut weights = vec![1.0 - 1.0 / (f0 * f0)];
    let axial = 1.0 / (2.0 * d as f64 * f0 * f0);
    for k in 0..d {
        // non-positive curvature: fall back to a narrow axis
        let lam = if eig.eigenvalues[k] > 1e-8 * top { eig.eigenvalues[k] } else { top };
        let sd = 1.0 / lam.sqrt();
        for sign in [1.0, -1.0] {
            points.push((0..d).map(|i| mode[i] + sign * delta * sd * eig.eigenvectors[(i, k)]).collect());
            weights.push(axial);
        }
    }
    (points, weights)
}

/// Fit a latent Gaussian model: locate the hyperparameter mode, build the
/// integration design and summarise the derived parameters.
pub fn fit<M: LatentGaussianModel>(model: &M, cfg: &FitConfig) -> Result<PosteriorFit> {
    let d = model.hyper_dim();
    let start = match &cfg.start {
        Some(s) if s.len() == d => s.clone(),
        Some(s) => {
            return Err(Error::invalid(format!(
                "start has {} hyperparameters, model has {d}",
                s.len()
            )))
        }
        None => model.default_hyper(),
    };
    let mut warm: Option<Vec<f64>> = None;
    let mut last_error: Option<Error> = None;
    let mut objective = |theta: &[f64]| -> f64 {
        match hyper_log_posterior(model, theta, warm.as_deref(), &cfg.newton) {
            Ok((lp, approx)) if lp.is_finite() => {
                warm = Some(approx.mode);
                -lp
            }
            Ok(_) => f64::INFINITY,
            Err(e) => {
                last_error = Some(e);
                f64::INFINITY
            }
        }
    };
    let steps = match &cfg.steps {
        Some(s) if s.len() == d => s.clone(),
        Some(_) => return Err(Error::invalid("steps and hyperparameters differ in length")),
        None => model.hyper_steps(),
    };
    let opt = nelder_mead(&mut objective, &start, &steps, &cfg.simplex);
    if !opt.value.is_finite() {
        // the engine's own error carries the diagnostic trace
        return Err(last_error.unwrap_or_else(|| {
            Error::Numerical("no feasible hyperparameter value with a finite posterior".into())
        }));
    }
    if !opt.converged {
        return Err(Error::OuterNotConverged {
            evaluations: opt.evaluations,
            best: -opt.value,
        });
    }
    let mode = opt.x;
    let (lp_mode, approx_mode) = hyper_log_posterior(model, &mode, warm.as_deref(), &cfg.newton)?;
    let x_mode = approx_mode.mode.clone();

    let hess = {
        let mut h = cfg.hessian_step;
        let mut out = None;
        for _ in 0..4 {
            let r = finite_difference_hessian(
                |t| hyper_log_posterior(model, t, Some(&x_mode), &cfg.newton).map(|r| r.0),
                &mode,
                lp_mode,
                h,
            );
            if let Ok(v) = r {
                out = Some(v);
                break;
            }
            h *= 0.5;
        }
        out.ok_or_else(|| Error::Numerical("hyperparameter Hessian could not be evaluated".into()))?
    };

    let (points, design_w) = ccd_design(&mode, &hess, cfg.ccd_f0);
    let delta2 = cfg.ccd_f0 * cfg.ccd_f0 * d as f64;
    let mut design = Vec::with_capacity(points.len());
    for (k, (theta, w)) in points.into_iter().zip(design_w).enumerate() {
        let res = if k == 0 {
            Ok((lp_mode, approx_mode.clone()))
        } else {
            hyper_log_posterior(model, &theta, Some(&x_mode), &cfg.newton)
        };
        match res {
            Ok((lp, a)) if lp.is_finite() => {
                // exp(lp) relative to the Gaussian density implied by the Hessian
                let log_w = w.ln() + lp - lp_mode + if k == 0 { 0.0 } else { 0.5 * delta2 };
                design.push(DesignPoint {
                    theta,
                    log_posterior: lp,
                    weight: log_w,
                    mode: a.mode,
                    factor: Some(a.factor),
                });
            }
            _ => {}
        }
    }
    let top = design.iter().map(|p| p.weight).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = design.iter().map(|p| (p.weight - top).exp()).sum();
    for p in &mut design {
        p.weight = (p.weight - top).exp() / total;
    }

    let mut fit = PosteriorFit {
        hyper_mode: mode,
        log_posterior_at_mode: lp_mode,
        hyper_hessian: hess,
        design,
        summaries: Vec::new(),
        evaluations: opt.evaluations,
        converged: opt.converged,
    };
    fit.summaries = summarize(model, &fit, cfg.n_samples, cfg.seed)?;
    Ok(fit)
}

/// Marginal summaries of the model's derived parameters from posterior draws.
pub fn summarize<M: LatentGaussianModel>(model: &M, fit: &PosteriorFit, n: usize, seed: u64) -> Result<Vec<ParamSummary>> {
    let names = model.parameter_names();
    if names.is_empty() || n == 0 {
        return Ok(Vec::new());
    }
    let mut cols = vec![Vec::with_capacity(n); names.len()];
    for_each_sample(fit, n, seed, |theta, x| {
        for (c, v) in cols.iter_mut().zip(model.parameter_values(theta, x)) {
            c.push(v);
        }
        Ok(())
    })?;
    Ok(names
        .into_iter()
        .zip(cols)
        .map(|(name, draws)| ParamSummary::from_draws(name, &draws))
        .collect())
}

/// Draw `n` joint samples `(theta, x)` and pass each to `f`. A design point
/// is chosen by weight, then `x = mode + L⁻ᵀ z` under its Gaussian approximation.
pub fn for_each_sample(
    fit: &PosteriorFit,
    n: usize,
    seed: u64,
    mut f: impl FnMut(&[f64], &[f64]) -> Result<()>,
) -> Result<()> {
    if fit.design.iter().any(|p| p.weight > 0.0 && p.factor.is_none()) {
        return Err(Error::invalid("posterior factors are missing; call restore_factors first"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cum: Vec<f64> = fit
        .design
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.weight;
            Some(*acc)
        })
        .collect();
    let total = *cum.last().unwrap_or(&0.0);
    let mut z = Vec::new();
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * total;
        let k = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
        let p = &fit.design[k];
        let factor = p.factor.as_ref().expect("checked above");
        z.clear();
        z.extend((0..p.mode.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let dx = factor.whiten_inverse(&z);
        let x: Vec<f64> = p.mode.iter().zip(&dx).map(|(m, e)| m + e).collect();
        f(&p.theta, &x)?;
    }
    Ok(())
}

/// Joint posterior draws.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub theta: Vec<Vec<f64>>,
    pub latent: Vec<Vec<f64>>,
}

pub fn sample_posterior(fit: &PosteriorFit, n: usize, seed: u64) -> Result<PosteriorSamples> {
    let mut out = PosteriorSamples {
        theta: Vec::with_capacity(n),
        latent: Vec::with_capacity(n),
    };
    for_each_sample(fit, n, seed, |t, x| {
        out.theta.push(t.to_vec());
        out.latent.push(x.to_vec());
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests;

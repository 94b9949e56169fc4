//! Posterior predictive scoring: DIC, WAIC, CPO/LPML, CRPS and bias/RMSE.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, PosteriorFit};
use crate::model::{poisson_logpmf, ModelVariant, Source, SurveyModel};

/// Pointwise log-likelihood values, one row per posterior sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikMatrix {
    n_obs: usize,
    values: Vec<f64>,
}

impl LogLikMatrix {
    pub fn new(n_obs: usize) -> Self {
        Self {
            n_obs,
            values: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.first().map_or(0, Vec::len));
        for r in rows {
            m.push(r)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.n_obs {
            return Err(Error::invalid("log-likelihood row has the wrong length"));
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_samples(&self) -> usize {
        self.values.len().checked_div(self.n_obs).unwrap_or(0)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_obs..(s + 1) * self.n_obs]
    }

    /// Values of observation `i` across samples.
    pub fn column(&self, i: usize) -> impl Iterator<Item = f64> + Clone + '_ {
        self.values.iter().skip(i).step_by(self.n_obs.max(1)).copied()
    }

    /// Restrict to a subset of observations.
    pub fn select(&self, obs: &[usize]) -> Self {
        let mut out = Self::new(obs.len());
        for s in 0..self.n_samples() {
            let r = self.row(s);
            out.values.extend(obs.iter().map(|&i| r[i]));
        }
        out
    }

    fn check(&self) -> Result<()> {
        if self.n_samples() == 0 || self.n_obs == 0 {
            return Err(Error::invalid("log-likelihood matrix is empty"));
        }
        Ok(())
    }
}

/// `ln mean exp(v)` computed stably.
fn log_mean_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + (x - m).exp(), n + 1));
    m + (sum / n as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub d_bar: f64,
    pub p_d: f64,
}

/// `DIC = D̄ + p_D` with `p_D = D̄ - D(plug-in)`; `plug_in_loglik` is the total
/// log-likelihood at the posterior mean of the linear predictors.
pub fn dic(ll: &LogLikMatrix, plug_in_loglik: f64) -> Result<Dic> {
    ll.check()?;
    let s = ll.n_samples();
    let d_bar = -2.0 * (0..s).map(|k| ll.row(k).iter().sum::<f64>()).sum::<f64>() / s as f64;
    let p_d = d_bar + 2.0 * plug_in_loglik;
    Ok(Dic {
        dic: d_bar + p_d,
        d_bar,
        p_d,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    /// `+inf` when some observation has zero predictive density.
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
    /// First observation whose predictive density is zero.
    pub zero_density: Option<usize>,
}

/// `WAIC = -2 (Σ ln mean_s p(y_i|θˢ) - Σ var_s ln p(y_i|θˢ))`, sample variance
/// with `S - 1` denominator (zero for a single sample).
pub fn waic(ll: &LogLikMatrix) -> Result<Waic> {
    ll.check()?;
    let s = ll.n_samples() as f64;
    let mut lppd = 0.0;
    let mut p = 0.0;
    let mut zero_density = None;
    for i in 0..ll.n_obs() {
        let lme = log_mean_exp(ll.column(i));
        if lme == f64::NEG_INFINITY && zero_density.is_none() {
            zero_density = Some(i);
        }
        lppd += lme;
        if s > 1.0 {
            let mean = ll.column(i).sum::<f64>() / s;
            p += ll.column(i).map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0);
        }
    }
    let waic = if zero_density.is_some() {
        f64::INFINITY
    } else {
        -2.0 * (lppd - p)
    };
    Ok(Waic {
        waic,
        lppd,
        p_waic: p,
        zero_density,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cpo {
    pub log_cpo: Vec<f64>,
    pub lpml: f64,
    /// Observations whose importance weights have coefficient of variation
    /// above the threshold or overflowed.
    pub unstable: Vec<usize>,
}

impl Cpo {
    pub fn cpo(&self) -> Vec<f64> {
        self.log_cpo.iter().map(|v| v.exp()).collect()
    }
}

/// Harmonic-mean CPO: `CPO_i = [mean_s 1/p(y_i|θˢ)]⁻¹`, `LPML = Σ ln CPO_i`.
pub fn cpo_lpml(ll: &LogLikMatrix, cv_threshold: f64) -> Result<Cpo> {
    ll.check()?;
    let s = ll.n_samples() as f64;
    let mut log_cpo = Vec::with_capacity(ll.n_obs());
    let mut unstable = Vec::new();
    for i in 0..ll.n_obs() {
        let neg = ll.column(i).map(|v| -v);
        let lme = log_mean_exp(neg.clone());
        log_cpo.push(-lme);
        if !lme.is_finite() {
            unstable.push(i);
            continue;
        }
        // weights relative to their maximum
        let m = neg.clone().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = neg.map(|v| (v - m).exp()).collect();
        let mean = w.iter().sum::<f64>() / s;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s;
        if var.sqrt() / mean > cv_threshold {
            unstable.push(i);
        }
    }
    Ok(Cpo {
        lpml: log_cpo.iter().sum(),
        log_cpo,
        unstable,
    })
}

/// `mean|X - y| - ½ mean|X - X'|` over all ordered draw pairs.
pub fn crps_empirical(draws: &[f64], y: f64) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::invalid("CRPS needs at least two draws"));
    }
    if draws.iter().any(|d| !d.is_finite()) || !y.is_finite() {
        return Err(Error::invalid("CRPS inputs must be finite"));
    }
    let n = draws.len() as f64;
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let abs_dev = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    // Σ_{s,t} |x_s - x_t| = 2 Σ_k (2k - n - 1) x_(k), k = 1..n
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| (2.0 * (k as f64 + 1.0) - n - 1.0) * x)
        .sum::<f64>()
        * 2.0
        / (n * n);
    Ok((abs_dev - 0.5 * pair).max(0.0))
}

/// `bias = mean(θᵖ - θ̃)`, `rmse = sqrt(mean (θᵖ - θ̃)²)`.
pub fn bias_rmse(samples: &[f64], truth: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("bias/RMSE needs at least one sample"));
    }
    let n = samples.len() as f64;
    let bias = samples.iter().map(|s| s - truth).sum::<f64>() / n;
    let mse = samples.iter().map(|s| (s - truth).powi(2)).sum::<f64>() / n;
    Ok((bias, mse.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AssessConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub cv_threshold: f64,
    /// Source whose observations enter RMSE, LPML and CRPS.
    pub predictive_source: u8,
}

impl Default for AssessConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seed: 11,
            cv_threshold: 5.0,
            predictive_source: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub model: ModelVariant,
    pub n_samples: usize,
    pub dic: f64,
    pub p_d: f64,
    pub waic: f64,
    pub p_waic: f64,
    pub lpml: f64,
    pub mean_crps: f64,
    pub rmse: f64,
    pub predictive_source: u8,
    /// Observation indices (into the dataset) of the predictive subset.
    pub predictive_obs: Vec<usize>,
    pub cpo: Vec<f64>,
    pub crps: Vec<f64>,
    pub unstable_cpo: Vec<usize>,
}

/// Score a fitted survey model. DIC and WAIC use every observation; RMSE,
/// LPML and CRPS use the observations of `cfg.predictive_source`.
pub fn assess(model: &SurveyModel, fit: &PosteriorFit, cfg: &AssessConfig) -> Result<AssessmentReport> {
    if cfg.n_samples < 500 {
        return Err(Error::invalid("assessment needs at least 500 posterior samples"));
    }
    let source = Source::new(cfg.predictive_source)?;
    let obs = &model.data().observations;
    let subset: Vec<usize> = (0..obs.len()).filter(|&i| obs[i].source == source).collect();
    if subset.is_empty() {
        return Err(Error::invalid(format!("no observations from source {}", source.number())));
    }
    let mut ll = LogLikMatrix::new(obs.len());
    let mut eta_sum = vec![0.0; obs.len()];
    let mut lambda_sum = vec![0.0; subset.len()];
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.n_samples); subset.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_C4F5);
    let mut row = vec![0.0; obs.len()];
    inference::for_each_sample(fit, cfg.n_samples, cfg.seed, |theta, x| {
        let eta = model.predictors(theta, x)?;
        for (i, (o, e)) in obs.iter().zip(&eta).enumerate() {
            row[i] = poisson_logpmf(o.y, *e);
            eta_sum[i] += e;
        }
        ll.push(&row)?;
        for (k, &i) in subset.iter().enumerate() {
            let lambda = eta[i].exp();
            lambda_sum[k] += lambda;
            let y = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::Numerical(format!("Poisson({lambda}): {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            draws[k].push(y);
        }
        Ok(())
    })?;
    let s = cfg.n_samples as f64;
    let plug_in: f64 = obs.iter().zip(&eta_sum).map(|(o, e)| poisson_logpmf(o.y, e / s)).sum();
    let d = dic(&ll, plug_in)?;
    let w = waic(&ll)?;
    let c = cpo_lpml(&ll.select(&subset), cfg.cv_threshold)?;
    let crps = subset
        .iter()
        .zip(&draws)
        .map(|(&i, d)| crps_empirical(d, obs[i].y))
        .collect::<Result<Vec<f64>>>()?;
    let rmse = (subset
        .iter()
        .zip(&lambda_sum)
        .map(|(&i, l)| (l / s - obs[i].y).powi(2))
        .sum::<f64>()
        / subset.len() as f64)
        .sqrt();
    Ok(AssessmentReport {
        model: model.spec().variant,
        n_samples: cfg.n_samples,
        dic: d.dic,
        p_d: d.p_d,
        waic: w.waic,
        p_waic: w.p_waic,
        lpml: c.lpml,
        mean_crps: crps.iter().sum::<f64>() / crps.len() as f64,
        rmse,
        predictive_source: cfg.predictive_source,
        unstable_cpo: c.unstable.iter().map(|&k| subset[k]).collect(),
        cpo: c.cpo(),
        predictive_obs: subset,
        crps,
    })
}

/// Row labels of the comparison table, in order.
pub const TABLE_ROWS: [&str; 5] = ["DIC", "WAIC", "RMSE", "LMPL", "Mean CRPS"];

/// Plain-text comparison table with one column per report.
pub fn comparison_table(reports: &[AssessmentReport]) -> String {
    let mut s = format!("{:<10}", "");
    for r in reports {
        let _ = write!(s, " {:>12}", format!("Model {}", r.model.number()));
    }
    s.push('\n');
    for label in TABLE_ROWS {
        let _ = write!(s, "{label:<10}");
        for r in reports {
            let v = match label {
                "DIC" => r.dic,
                "WAIC" => r.waic,
                "RMSE" => r.rmse,
                "LMPL" => r.lpml,
                _ => r.mean_crps,
            };
            let _ = write!(s, " {v:>12.2}");
        }
        s.push('\n');
    }
    s
}

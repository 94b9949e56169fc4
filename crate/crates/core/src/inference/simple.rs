//! Small latent Gaussian models with closed-form or cheap reference answers.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{ConditionalDensity, LatentGaussianModel};
use crate::error::{Error, Result};
use crate::model::poisson_logpmf;
use crate::sparse::{self, EnvelopeCholesky, EnvelopeSymbolic, SparseMatrix};

/// `y = Z x + e`, `e ~ N(0, I / tau_e)`, `x ~ N(0, (tau_x R)⁻¹)` with
/// `theta = (log tau_x, log tau_e)`. The hyperprior is flat unless
/// [`GaussianLinearModel::with_hyper_prior`] sets independent `N(0, 1/p)` terms.
pub struct GaussianLinearModel {
    hyper_precision: f64,
    z: SparseMatrix,
    y: Vec<f64>,
    structure: SparseMatrix,
    log_det_structure: f64,
    symbolic: Arc<EnvelopeSymbolic>,
}

impl GaussianLinearModel {
    pub fn new(z: SparseMatrix, y: Vec<f64>, structure: SparseMatrix) -> Result<Self> {
        let m = structure.rows();
        if z.rows() != y.len() || z.cols() != m || structure.cols() != m {
            return Err(Error::invalid("inconsistent dimensions"));
        }
        let pattern = &sparse::weighted_gram(&z.map(|v| v.abs()), &vec![1.0; y.len()]) + &structure.map(|v| v.abs());
        let symbolic = Arc::new(EnvelopeSymbolic::reverse_cuthill_mckee(&pattern, &[])?);
        let log_det_structure = EnvelopeCholesky::factorize(symbolic.clone(), &structure)?.log_det();
        Ok(Self {
            hyper_precision: 0.0,
            z,
            y,
            structure,
            log_det_structure,
            symbolic,
        })
    }

    pub fn with_hyper_prior(mut self, precision: f64) -> Self {
        self.hyper_precision = precision;
        self
    }
}

pub struct GaussianConditional<'a> {
    model: &'a GaussianLinearModel,
    tau_x: f64,
    tau_e: f64,
    log_prior: f64,
}

impl ConditionalDensity for GaussianConditional<'_> {
    fn log_density(&self, x: &[f64]) -> Result<f64> {
        let m = self.model;
        let n = m.y.len() as f64;
        let d = x.len() as f64;
        let fit = sparse::mat_vec(&m.z, x);
        let rss: f64 = m.y.iter().zip(&fit).map(|(y, f)| (y - f).powi(2)).sum();
        let ln2pi = (2.0 * PI).ln();
        Ok(self.log_prior - 0.5 * n * ln2pi + 0.5 * n * self.tau_e.ln() - 0.5 * self.tau_e * rss - 0.5 * d * ln2pi
            + 0.5 * (d * self.tau_x.ln() + m.log_det_structure)
            - 0.5 * self.tau_x * sparse::quad_form(&m.structure, x))
    }

    fn gradient_hessian(&self, x: &[f64]) -> Result<(Vec<f64>, SparseMatrix)> {
        let m = self.model;
        let fit = sparse::mat_vec(&m.z, x);
        let resid: Vec<f64> = m.y.iter().zip(&fit).map(|(y, f)| self.tau_e * (y - f)).collect();
        let rx = sparse::mat_vec(&m.structure, x);
        let g = sparse::mat_t_vec(&m.z, &resid)
            .into_iter()
            .zip(rx)
            .map(|(a, b)| a - self.tau_x * b)
            .collect();
        let h = &sparse::weighted_gram(&m.z, &vec![self.tau_e; m.y.len()]) + &m.structure.map(|v| v * self.tau_x);
        Ok((g, h))
    }
}

impl LatentGaussianModel for GaussianLinearModel {
    type Conditional<'a> = GaussianConditional<'a>;

    fn hyper_dim(&self) -> usize {
        2
    }

    fn latent_dim(&self) -> usize {
        self.structure.rows()
    }

    fn condition(&self, theta: &[f64]) -> Result<GaussianConditional<'_>> {
        if theta.iter().any(|t| !t.is_finite() || t.abs() > 30.0) {
            return Err(Error::invalid("log precision out of range"));
        }
        let p = self.hyper_precision;
        let log_prior = if p > 0.0 {
            theta.iter().map(|t| 0.5 * (p / (2.0 * PI)).ln() - 0.5 * p * t * t).sum()
        } else {
            0.0
        };
        Ok(GaussianConditional {
            model: self,
            tau_x: theta[0].exp(),
            tau_e: theta[1].exp(),
            log_prior,
        })
    }

    fn initial_latent(&self) -> Vec<f64> {
        vec![0.0; self.latent_dim()]
    }

    fn symbolic(&self) -> Arc<EnvelopeSymbolic> {
        self.symbolic.clone()
    }

    fn parameter_names(&self) -> Vec<String> {
        (0..self.latent_dim()).map(|i| format!("x{i}")).collect()
    }

    fn parameter_values(&self, _theta: &[f64], x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

/// `y_i ~ Poisson(exp(z_iᵀ x))`, `x ~ N(0, I / tau)` with `tau` fixed; no hyperparameters.
pub struct PoissonRegression {
    z: SparseMatrix,
    y: Vec<f64>,
    tau: f64,
    symbolic: Arc<EnvelopeSymbolic>,
}

impl PoissonRegression {
    pub fn new(z: SparseMatrix, y: Vec<f64>, tau: f64) -> Result<Self> {
        if z.rows() != y.len() || !(tau > 0.0) {
            return Err(Error::invalid("inconsistent Poisson regression"));
        }
        let m = z.cols();
        let pattern = &sparse::weighted_gram(&z.map(|v| v.abs()), &vec![1.0; y.len()]) + &sparse::diagonal(&vec![1.0; m]);
        let symbolic = Arc::new(EnvelopeSymbolic::reverse_cuthill_mckee(&pattern, &[])?);
        Ok(Self { z, y, tau, symbolic })
    }

    pub fn design(&self) -> &SparseMatrix {
        &self.z
    }

    pub fn counts(&self) -> &[f64] {
        &self.y
    }

    pub fn prior_precision(&self) -> f64 {
        self.tau
    }
}

impl ConditionalDensity for &PoissonRegression {
    fn log_density(&self, x: &[f64]) -> Result<f64> {
        let eta = sparse::mat_vec(&self.z, x);
        let d = x.len() as f64;
        let mut lp = 0.5 * d * (self.tau / (2.0 * PI)).ln() - 0.5 * self.tau * x.iter().map(|v| v * v).sum::<f64>();
        for (i, (y, e)) in self.y.iter().zip(&eta).enumerate() {
            if !e.exp().is_finite() {
                return Err(Error::NonFinitePredictor { index: i });
            }
            lp += poisson_logpmf(*y, *e);
        }
        Ok(lp)
    }

    fn gradient_hessian(&self, x: &[f64]) -> Result<(Vec<f64>, SparseMatrix)> {
        let eta = sparse::mat_vec(&self.z, x);
        let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let resid: Vec<f64> = self.y.iter().zip(&mu).map(|(y, m)| y - m).collect();
        let g = sparse::mat_t_vec(&self.z, &resid)
            .into_iter()
            .zip(x)
            .map(|(a, b)| a - self.tau * b)
            .collect();
        let h = &sparse::weighted_gram(&self.z, &mu) + &sparse::diagonal(&vec![self.tau; x.len()]);
        Ok((g, h))
    }
}

impl LatentGaussianModel for PoissonRegression {
    type Conditional<'a> = &'a PoissonRegression;

    fn hyper_dim(&self) -> usize {
        0
    }

    fn latent_dim(&self) -> usize {
        self.z.cols()
    }

    fn condition(&self, _theta: &[f64]) -> Result<&PoissonRegression> {
        Ok(self)
    }

    fn initial_latent(&self) -> Vec<f64> {
        vec![0.0; self.latent_dim()]
    }

    fn symbolic(&self) -> Arc<EnvelopeSymbolic> {
        self.symbolic.clone()
    }

    fn parameter_names(&self) -> Vec<String> {
        (0..self.latent_dim()).map(|i| format!("x{i}")).collect()
    }

    fn parameter_values(&self, _theta: &[f64], x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

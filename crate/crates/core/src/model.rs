//! The three joint count models.
//!
//! Every source `j` observes a Poisson count whose log-mean is
//!
//! ```text
//! eta = x(s)ᵀ beta + c_j + psi_j · w1(s) + [j = 2, Model 3] · w2(s)
//! ```
//!
//! with `c_1 = 0`, `c_j = log zeta_j` otherwise and `psi_j = 1` for Model 1
//! and for the reference source. The latent block is
//! `(beta, log zeta_2..4, w1 nodes, [w2 nodes])`; the hyperparameters are
//! `(log rho1, log sigma1, log tau_2..4, [psi_2..4], [log rho2, log sigma2])`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::inference::{ConditionalDensity, LatentGaussianModel};
use crate::mesh::{Point2, Projector, TriMesh};
use crate::spde::{MaternParams, PcPriorSpec, SpdeBasis};
use crate::sparse::{self, EnvelopeCholesky, EnvelopeSymbolic, SparseMatrix};

/// Country (survey scheme) of a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Country {
    A,
    B,
}

impl fmt::Display for Country {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Country::A => "A",
            Country::B => "B",
        })
    }
}

impl std::str::FromStr for Country {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Country::A),
            "B" | "b" => Ok(Country::B),
            other => Err(Error::invalid(format!("unknown country `{other}` (expected A or B)"))),
        }
    }
}

/// Survey source, numbered 1 to 4. Sources 1 and 2 belong to country A,
/// 3 and 4 to country B; source 1 is the reference likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Source(u8);

impl Source {
    pub const ALL: [Source; 4] = [Source(1), Source(2), Source(3), Source(4)];

    pub fn new(k: u8) -> Result<Self> {
        if (1..=4).contains(&k) {
            Ok(Source(k))
        } else {
            Err(Error::invalid(format!("source must be 1..4, got {k}")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// Zero-based index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn country(self) -> Country {
        if self.0 <= 2 {
            Country::A
        } else {
            Country::B
        }
    }
}

impl TryFrom<u8> for Source {
    type Error = Error;
    fn try_from(k: u8) -> Result<Self> {
        Source::new(k)
    }
}

impl From<Source> for u8 {
    fn from(s: Source) -> u8 {
        s.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub location: Point2,
    pub country: Country,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Index into [`SurveyDataset::sites`].
    pub site: usize,
    pub source: Source,
    /// Non-negative, possibly averaged, count.
    pub y: f64,
}

/// Site-level counts for the four sources together with standardised covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyDataset {
    pub sites: Vec<Site>,
    pub observations: Vec<Observation>,
    pub covariate_names: Vec<String>,
    /// `covariates[site][k]`
    pub covariates: Vec<Vec<f64>>,
    pub source_labels: [String; 4],
}

impl SurveyDataset {
    pub fn default_labels() -> [String; 4] {
        [
            "points_A".to_string(),
            "lines_A".to_string(),
            "points_B".to_string(),
            "lines_B".to_string(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.covariate_names.len();
        if self.covariates.len() != self.sites.len() {
            return Err(Error::invalid("covariate rows do not match the number of sites"));
        }
        if let Some(i) = self.covariates.iter().position(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("covariate row for site `{}` is malformed", self.sites[i].id)));
        }
        for (k, o) in self.observations.iter().enumerate() {
            let site = self
                .sites
                .get(o.site)
                .ok_or_else(|| Error::invalid(format!("observation {k} references a missing site")))?;
            if !(o.y >= 0.0) || !o.y.is_finite() {
                return Err(Error::invalid(format!("observation {k} has an invalid count {}", o.y)));
            }
            if o.source.country() != site.country {
                return Err(Error::invalid(format!(
                    "source {} observed at site `{}` in country {}",
                    o.source.number(),
                    site.id,
                    site.country
                )));
            }
        }
        Ok(())
    }

    pub fn count_by_source(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for o in &self.observations {
            c[o.source.index()] += 1;
        }
        c
    }

    pub fn mean_by_source(&self) -> [f64; 4] {
        let mut s = [0.0; 4];
        let c = self.count_by_source();
        for o in &self.observations {
            s[o.source.index()] += o.y;
        }
        std::array::from_fn(|j| if c[j] > 0 { s[j] / c[j] as f64 } else { 0.0 })
    }

    pub fn locations(&self) -> Vec<Point2> {
        self.sites.iter().map(|s| s.location).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    M1,
    M2,
    M3,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::M1, ModelVariant::M2, ModelVariant::M3];

    pub fn has_psi(self) -> bool {
        !matches!(self, ModelVariant::M1)
    }

    pub fn has_second_field(self) -> bool {
        matches!(self, ModelVariant::M3)
    }

    pub fn hyper_dim(self) -> usize {
        match self {
            ModelVariant::M1 => 5,
            ModelVariant::M2 => 8,
            ModelVariant::M3 => 10,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            ModelVariant::M1 => 1,
            ModelVariant::M2 => 2,
            ModelVariant::M3 => 3,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "M{}", self.number())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" | "1" => Ok(ModelVariant::M1),
            "M2" | "2" => Ok(ModelVariant::M2),
            "M3" | "3" => Ok(ModelVariant::M3),
            other => Err(Error::invalid(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Prior blocks shared by the three models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub field1: PcPriorSpec,
    pub field2: Option<PcPriorSpec>,
    pub beta_precision: f64,
    pub psi_mean: f64,
    pub psi_precision: f64,
    /// Gamma shape/rate on each `tau_j`.
    pub tau_shape: f64,
    pub tau_rate: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            field1: PcPriorSpec {
                rho0: 20_000.0,
                alpha_rho: 0.1,
                sigma0: 1.0,
                alpha_sigma: 0.1,
            },
            field2: Some(PcPriorSpec {
                rho0: 2_000.0,
                alpha_rho: 0.1,
                sigma0: 3.0,
                alpha_sigma: 0.1,
            }),
            beta_precision: 0.01,
            psi_mean: 1.0,
            psi_precision: 0.1,
            tau_shape: 1.0,
            tau_rate: 5e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: ModelVariant,
    pub covariate_names: Vec<String>,
    pub priors: PriorSpec,
}

impl ModelSpec {
    pub fn new(variant: ModelVariant, covariate_names: Vec<String>) -> Self {
        Self {
            variant,
            covariate_names,
            priors: PriorSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.field1.validate()?;
        match (self.variant, &self.priors.field2) {
            (ModelVariant::M3, None) => {
                return Err(Error::invalid("Model 3 needs a PC prior for the second field"))
            }
            (_, Some(p)) => p.validate()?,
            _ => {}
        }
        let pr = &self.priors;
        if !(pr.beta_precision > 0.0) || !(pr.psi_precision > 0.0) || !(pr.tau_shape > 0.0) || !(pr.tau_rate > 0.0) {
            return Err(Error::invalid("prior precisions and Gamma parameters must be positive"));
        }
        Ok(())
    }

    pub fn layout(&self, n_nodes: usize) -> LatentLayout {
        LatentLayout {
            n_beta: self.covariate_names.len() + 1,
            n_nodes,
            second_field: self.variant.has_second_field(),
        }
    }
}

/// Index ranges of the latent blocks in the flat latent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentLayout {
    pub n_beta: usize,
    pub n_nodes: usize,
    pub second_field: bool,
}

impl LatentLayout {
    pub fn beta(&self) -> std::ops::Range<usize> {
        0..self.n_beta
    }
    pub fn log_zeta(&self) -> std::ops::Range<usize> {
        self.n_beta..self.n_beta + 3
    }
    pub fn w1(&self) -> std::ops::Range<usize> {
        let s = self.n_beta + 3;
        s..s + self.n_nodes
    }
    pub fn w2(&self) -> Option<std::ops::Range<usize>> {
        let s = self.n_beta + 3 + self.n_nodes;
        self.second_field.then(|| s..s + self.n_nodes)
    }
    pub fn dim(&self) -> usize {
        self.n_beta + 3 + self.n_nodes * if self.second_field { 2 } else { 1 }
    }
    /// Fixed-effect block (coupled to every observation).
    pub fn dense(&self) -> Vec<usize> {
        (0..self.n_beta + 3).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub beta: Vec<f64>,
    pub log_zeta: [f64; 3],
    pub w1: Vec<f64>,
    pub w2: Option<Vec<f64>>,
}

impl LatentVector {
    pub fn zeros(layout: &LatentLayout) -> Self {
        Self {
            beta: vec![0.0; layout.n_beta],
            log_zeta: [0.0; 3],
            w1: vec![0.0; layout.n_nodes],
            w2: layout.second_field.then(|| vec![0.0; layout.n_nodes]),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.beta.len() + 3 + 2 * self.w1.len());
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.log_zeta);
        v.extend_from_slice(&self.w1);
        if let Some(w2) = &self.w2 {
            v.extend_from_slice(w2);
        }
        v
    }

    pub fn from_flat(layout: &LatentLayout, x: &[f64]) -> Result<Self> {
        if x.len() != layout.dim() {
            return Err(Error::invalid(format!(
                "latent vector has length {}, expected {}",
                x.len(),
                layout.dim()
            )));
        }
        let lz = layout.log_zeta();
        Ok(Self {
            beta: x[layout.beta()].to_vec(),
            log_zeta: [x[lz.start], x[lz.start + 1], x[lz.start + 2]],
            w1: x[layout.w1()].to_vec(),
            w2: layout.w2().map(|r| x[r].to_vec()),
        })
    }
}

/// Hyperparameters on their working (mostly log) scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperVector {
    pub log_rho1: f64,
    pub log_sigma1: f64,
    pub log_tau: [f64; 3],
    pub psi: Option<[f64; 3]>,
    pub log_rho2: Option<f64>,
    pub log_sigma2: Option<f64>,
}

impl HyperVector {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.log_rho1, self.log_sigma1];
        v.extend_from_slice(&self.log_tau);
        if let Some(psi) = self.psi {
            v.extend_from_slice(&psi);
        }
        if let (Some(r), Some(s)) = (self.log_rho2, self.log_sigma2) {
            v.push(r);
            v.push(s);
        }
        v
    }

    pub fn from_slice(variant: ModelVariant, t: &[f64]) -> Result<Self> {
        if t.len() != variant.hyper_dim() {
            return Err(Error::invalid(format!(
                "{variant} has {} hyperparameters, got {}",
                variant.hyper_dim(),
                t.len()
            )));
        }
        Ok(Self {
            log_rho1: t[0],
            log_sigma1: t[1],
            log_tau: [t[2], t[3], t[4]],
            psi: variant.has_psi().then(|| [t[5], t[6], t[7]]),
            log_rho2: variant.has_second_field().then(|| t[8]),
            log_sigma2: variant.has_second_field().then(|| t[9]),
        })
    }

    pub fn names(variant: ModelVariant) -> Vec<&'static str> {
        let mut n = vec!["log_rho1", "log_sigma1", "log_tau2", "log_tau3", "log_tau4"];
        if variant.has_psi() {
            n.extend(["psi2", "psi3", "psi4"]);
        }
        if variant.has_second_field() {
            n.extend(["log_rho2", "log_sigma2"]);
        }
        n
    }

    pub fn field1(&self) -> Result<MaternParams> {
        MaternParams::new(self.log_rho1.exp(), self.log_sigma1.exp())
    }

    pub fn field2(&self) -> Result<Option<MaternParams>> {
        match (self.log_rho2, self.log_sigma2) {
            (Some(r), Some(s)) => Ok(Some(MaternParams::new(r.exp(), s.exp())?)),
            _ => Ok(None),
        }
    }

    /// Copy coefficient for source `j` (one for the reference source and Model 1).
    pub fn psi_for(&self, source: Source) -> f64 {
        match (source.index(), self.psi) {
            (0, _) | (_, None) => 1.0,
            (j, Some(p)) => p[j - 1],
        }
    }
}

fn check_dims(spec: &ModelSpec, latent: &LatentVector, hyper: &HyperVector, data: &SurveyDataset, a: &Projector) -> Result<()> {
    let p = spec.covariate_names.len();
    if latent.beta.len() != p + 1 || data.covariate_names.len() != p {
        return Err(Error::invalid("fixed-effect dimension does not match the covariates"));
    }
    if spec.covariate_names != data.covariate_names {
        return Err(Error::invalid("model and dataset covariate names differ"));
    }
    if a.n_locations() != data.sites.len() || a.matrix.cols() != latent.w1.len() {
        return Err(Error::invalid("projector does not match sites and mesh nodes"));
    }
    if spec.variant.has_second_field() != latent.w2.is_some() {
        return Err(Error::invalid("second field present/absent inconsistently with the variant"));
    }
    if let Some(w2) = &latent.w2 {
        if w2.len() != latent.w1.len() {
            return Err(Error::invalid("second field must live on the same mesh"));
        }
    }
    if spec.variant.has_psi() != hyper.psi.is_some()
        || spec.variant.has_second_field() != hyper.log_rho2.is_some()
    {
        return Err(Error::invalid("hyperparameter vector does not match the variant"));
    }
    Ok(())
}

/// Linear predictor of every observation.
pub fn linear_predictors(
    spec: &ModelSpec,
    latent: &LatentVector,
    hyper: &HyperVector,
    data: &SurveyDataset,
    a: &Projector,
) -> Result<Vec<f64>> {
    check_dims(spec, latent, hyper, data, a)?;
    let w1 = a.apply(&latent.w1);
    let w2 = latent.w2.as_ref().map(|w| a.apply(w));
    Ok(data
        .observations
        .iter()
        .map(|o| {
            let x = &data.covariates[o.site];
            let mut eta = latent.beta[0] + x.iter().zip(&latent.beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let j = o.source.index();
            if j > 0 {
                eta += latent.log_zeta[j - 1];
            }
            eta += hyper.psi_for(o.source) * w1[o.site];
            if let (Some(w2), 2) = (&w2, o.source.number()) {
                eta += w2[o.site];
            }
            eta
        })
        .collect())
}

/// Express per-source scale factors `zeta*_1..4` relative to the reference
/// source: returns `(intercept + ln zeta*_1, [ln(zeta*_j / zeta*_1)])`.
pub fn absorb_reference(intercept: f64, zeta_star: [f64; 4]) -> Result<(f64, [f64; 3])> {
    if zeta_star.iter().any(|z| !(*z > 0.0) || !z.is_finite()) {
        return Err(Error::invalid("scale factors must be positive"));
    }
    let r = zeta_star[0];
    Ok((
        intercept + r.ln(),
        [(zeta_star[1] / r).ln(), (zeta_star[2] / r).ln(), (zeta_star[3] / r).ln()],
    ))
}

/// Poisson log-mass with `lnΓ(y + 1)` in place of `ln y!`.
pub fn poisson_logpmf(y: f64, eta: f64) -> f64 {
    if y == 0.0 {
        return -eta.exp();
    }
    y * eta - eta.exp() - ln_gamma(y + 1.0)
}

fn gaussian_logpdf(x: f64, mean: f64, precision: f64) -> f64 {
    0.5 * (precision / (2.0 * PI)).ln() - 0.5 * precision * (x - mean).powi(2)
}

/// Hyperprior log density on the working scale, Jacobians included.
pub fn hyperprior_logpdf(spec: &ModelSpec, hyper: &HyperVector) -> Result<f64> {
    let pr = &spec.priors;
    let f1 = hyper.field1()?;
    let mut lp = pr.field1.log_pdf(f1.rho, f1.sigma)? + hyper.log_rho1 + hyper.log_sigma1;
    for &lt in &hyper.log_tau {
        // Gamma(shape, rate) on tau, Jacobian d tau / d log tau = tau
        let tau = lt.exp();
        lp += pr.tau_shape * pr.tau_rate.ln() - ln_gamma(pr.tau_shape) + pr.tau_shape * lt - pr.tau_rate * tau;
    }
    if let Some(psi) = hyper.psi {
        for v in psi {
            lp += gaussian_logpdf(v, pr.psi_mean, pr.psi_precision);
        }
    }
    if let Some(f2) = hyper.field2()? {
        let prior = pr
            .field2
            .as_ref()
            .ok_or_else(|| Error::invalid("second field present without a prior"))?;
        lp += prior.log_pdf(f2.rho, f2.sigma)? + hyper.log_rho2.unwrap_or(0.0) + hyper.log_sigma2.unwrap_or(0.0);
    }
    Ok(lp)
}

/// Gaussian log density of a GMRF with precision `q` (factor given).
fn gmrf_logpdf(q: &SparseMatrix, chol: &EnvelopeCholesky, w: &[f64]) -> f64 {
    let n = w.len() as f64;
    -0.5 * n * (2.0 * PI).ln() + 0.5 * chol.log_det() - 0.5 * sparse::quad_form(q, w)
}

/// Unnormalised log posterior `log p(y, x, theta)` (all normalising constants
/// of the likelihood and priors are included).
pub fn log_joint(
    spec: &ModelSpec,
    latent: &LatentVector,
    hyper: &HyperVector,
    data: &SurveyDataset,
    basis: &SpdeBasis,
    a: &Projector,
) -> Result<f64> {
    let eta = linear_predictors(spec, latent, hyper, data, a)?;
    let mut lp = 0.0;
    for (i, (o, &e)) in data.observations.iter().zip(&eta).enumerate() {
        if !e.is_finite() {
            return Err(Error::NonFinitePredictor { index: i });
        }
        lp += poisson_logpmf(o.y, e);
    }
    let q1 = basis.precision(&hyper.field1()?);
    lp += gmrf_logpdf(&q1.q, &q1.cholesky()?, &latent.w1);
    if let (Some(f2), Some(w2)) = (hyper.field2()?, &latent.w2) {
        let q2 = basis.precision(&f2);
        lp += gmrf_logpdf(&q2.q, &q2.cholesky()?, w2);
    }
    for &b in &latent.beta {
        lp += gaussian_logpdf(b, 0.0, spec.priors.beta_precision);
    }
    for (lz, lt) in latent.log_zeta.iter().zip(&hyper.log_tau) {
        lp += gaussian_logpdf(*lz, 0.0, lt.exp());
    }
    lp += hyperprior_logpdf(spec, hyper)?;
    Ok(lp)
}

/// Gradient and negative Hessian of [`log_joint`] with respect to the latent block.
pub fn grad_hess_latent(
    spec: &ModelSpec,
    latent: &LatentVector,
    hyper: &HyperVector,
    data: &SurveyDataset,
    basis: &SpdeBasis,
    a: &Projector,
) -> Result<(Vec<f64>, SparseMatrix)> {
    check_dims(spec, latent, hyper, data, a)?;
    let layout = spec.layout(latent.w1.len());
    let design = design_matrix(spec, &layout, hyper, data, a);
    let prior = prior_precision(spec, &layout, hyper, basis)?;
    let x = latent.to_flat();
    poisson_grad_hess(&design, &prior, data, &x)
}

fn poisson_grad_hess(
    design: &SparseMatrix,
    prior: &SparseMatrix,
    data: &SurveyDataset,
    x: &[f64],
) -> Result<(Vec<f64>, SparseMatrix)> {
    let eta = sparse::mat_vec(design, x);
    let mut resid = Vec::with_capacity(eta.len());
    let mut mu = Vec::with_capacity(eta.len());
    for (i, (o, e)) in data.observations.iter().zip(&eta).enumerate() {
        let m = e.exp();
        if !m.is_finite() {
            return Err(Error::NonFinitePredictor { index: i });
        }
        resid.push(o.y - m);
        mu.push(m);
    }
    let mut grad = sparse::mat_t_vec(design, &resid);
    for (g, qx) in grad.iter_mut().zip(sparse::mat_vec(prior, x)) {
        *g -= qx;
    }
    let hess = &sparse::weighted_gram(design, &mu) + prior;
    Ok((grad, hess))
}

/// Observation-by-latent design matrix for fixed hyperparameters.
fn design_matrix(
    spec: &ModelSpec,
    layout: &LatentLayout,
    hyper: &HyperVector,
    data: &SurveyDataset,
    a: &Projector,
) -> SparseMatrix {
    let mut trip = Vec::with_capacity(data.observations.len() * (layout.n_beta + 8));
    let w1 = layout.w1().start;
    let w2 = layout.w2().map(|r| r.start);
    for (i, o) in data.observations.iter().enumerate() {
        trip.push((i, 0, 1.0));
        for (k, v) in data.covariates[o.site].iter().enumerate() {
            trip.push((i, 1 + k, *v));
        }
        let j = o.source.index();
        if j > 0 {
            trip.push((i, layout.log_zeta().start + j - 1, 1.0));
        }
        let psi = hyper.psi_for(o.source);
        for (node, wgt) in a.row(o.site) {
            trip.push((i, w1 + node, psi * wgt));
            if let (Some(w2), 2) = (w2, o.source.number()) {
                trip.push((i, w2 + node, wgt));
            }
        }
    }
    let _ = spec;
    sparse::from_triplets(data.observations.len(), layout.dim(), &trip)
}

/// Block-diagonal prior precision of the latent vector.
fn prior_precision(spec: &ModelSpec, layout: &LatentLayout, hyper: &HyperVector, basis: &SpdeBasis) -> Result<SparseMatrix> {
    let mut trip = Vec::new();
    for i in layout.beta() {
        trip.push((i, i, spec.priors.beta_precision));
    }
    for (k, i) in layout.log_zeta().enumerate() {
        trip.push((i, i, hyper.log_tau[k].exp()));
    }
    let q1 = basis.precision_matrix(&hyper.field1()?);
    let off = layout.w1().start;
    for (&v, (i, j)) in q1.iter() {
        trip.push((off + i, off + j, v));
    }
    if let (Some(f2), Some(r)) = (hyper.field2()?, layout.w2()) {
        let q2 = basis.precision_matrix(&f2);
        for (&v, (i, j)) in q2.iter() {
            trip.push((r.start + i, r.start + j, v));
        }
    }
    Ok(sparse::from_triplets(layout.dim(), layout.dim(), &trip))
}

/// Admissible box for the working-scale hyperparameters.
#[derive(Debug, Clone, Copy)]
struct HyperBounds {
    log_rho: (f64, f64),
    log_sigma: (f64, f64),
    log_tau: (f64, f64),
    psi: (f64, f64),
}

/// A survey model bound to a dataset and mesh, ready for inference.
pub struct SurveyModel {
    spec: ModelSpec,
    data: SurveyDataset,
    basis: SpdeBasis,
    projector: Projector,
    layout: LatentLayout,
    symbolic: Arc<EnvelopeSymbolic>,
    bounds: HyperBounds,
    assembly: Assembly,
}

/// Fixed sparsity of the design and of the Hessian, with slot maps so that a
/// new hyperparameter value only rewrites numbers.
struct Assembly {
    /// Design at `psi = 1`.
    design_base: SparseMatrix,
    /// `(design entry, source index)` of first-field entries scaled by `psi`.
    psi_slots: Vec<(usize, usize)>,
    /// Hessian pattern with zero values.
    pattern: SparseMatrix,
    /// Per design row `i`, the `r_i²` Hessian slots of its entry pairs (row-major).
    gram_slots: Vec<usize>,
    gram_offsets: Vec<usize>,
    /// Hessian slots of the `beta` and `log zeta` diagonal entries.
    beta_slots: Vec<usize>,
    zeta_slots: [usize; 3],
    /// Hessian slot of each stored SPDE precision entry, per field.
    q1_slots: Vec<usize>,
    q2_slots: Option<Vec<usize>>,
}

impl Assembly {
    fn new(spec: &ModelSpec, layout: &LatentLayout, data: &SurveyDataset, a: &Projector, basis: &SpdeBasis) -> Result<Self> {
        let probe = HyperVector::from_slice(spec.variant, &default_probe(spec.variant))?;
        let design_base = design_matrix(spec, layout, &probe, data, a);
        let prior = prior_precision(spec, layout, &probe, basis)?;
        let ones = design_base.map(|_| 1.0);
        let pattern = (&sparse::weighted_gram(&ones, &vec![1.0; data.observations.len()]) + &prior.map(|_| 1.0)).map(|_| 0.0);
        let slot = |i: usize, j: usize| -> Result<usize> {
            pattern
                .nnz_index(i, j)
                .map(|k| k.0)
                .ok_or_else(|| Error::Numerical(format!("Hessian pattern lacks entry ({i}, {j})")))
        };

        let w1 = layout.w1();
        let mut psi_slots = Vec::new();
        let mut gram_slots = Vec::new();
        let mut gram_offsets = vec![0];
        let indptr = design_base.indptr();
        let indices = design_base.indices();
        for (i, o) in data.observations.iter().enumerate() {
            let range = indptr.outer_inds_sz(i);
            for k in range.clone() {
                if o.source.index() > 0 && w1.contains(&indices[k]) {
                    psi_slots.push((k, o.source.index()));
                }
            }
            for p in range.clone() {
                for q in range.clone() {
                    gram_slots.push(slot(indices[p], indices[q])?);
                }
            }
            gram_offsets.push(gram_slots.len());
        }
        let beta_slots = layout.beta().map(|i| slot(i, i)).collect::<Result<Vec<_>>>()?;
        let lz = layout.log_zeta().start;
        let zeta_slots = [slot(lz, lz)?, slot(lz + 1, lz + 1)?, slot(lz + 2, lz + 2)?];
        let q = basis.precision_matrix(&probe.field1()?);
        let block = |off: usize| -> Result<Vec<usize>> { q.iter().map(|(_, (i, j))| slot(off + i, off + j)).collect() };
        let q1_slots = block(w1.start)?;
        let q2_slots = layout.w2().map(|r| block(r.start)).transpose()?;
        Ok(Self {
            design_base,
            psi_slots,
            pattern,
            gram_slots,
            gram_offsets,
            beta_slots,
            zeta_slots,
            q1_slots,
            q2_slots,
        })
    }

    fn design(&self, hyper: &HyperVector) -> SparseMatrix {
        let mut d = self.design_base.clone();
        if let Some(psi) = hyper.psi {
            let data = d.data_mut();
            for &(k, j) in &self.psi_slots {
                data[k] *= psi[j - 1];
            }
        }
        d
    }

    fn prior(&self, spec: &ModelSpec, hyper: &HyperVector, basis: &SpdeBasis) -> Result<SparseMatrix> {
        let mut p = self.pattern.clone();
        let v = p.data_mut();
        for &k in &self.beta_slots {
            v[k] = spec.priors.beta_precision;
        }
        for (k, lt) in self.zeta_slots.iter().zip(&hyper.log_tau) {
            v[*k] = lt.exp();
        }
        let q1 = basis.precision_matrix(&hyper.field1()?);
        for (k, x) in self.q1_slots.iter().zip(q1.data()) {
            v[*k] += x;
        }
        if let (Some(f2), Some(slots)) = (hyper.field2()?, &self.q2_slots) {
            let q2 = basis.precision_matrix(&f2);
            for (k, x) in slots.iter().zip(q2.data()) {
                v[*k] += x;
            }
        }
        Ok(p)
    }

    /// `prior + designᵀ diag(w) design` on the fixed pattern.
    fn hessian(&self, design: &SparseMatrix, prior: &SparseMatrix, w: &[f64]) -> SparseMatrix {
        let mut h = prior.clone();
        let out = h.data_mut();
        let vals = design.data();
        let indptr = design.indptr();
        for (i, wi) in w.iter().enumerate() {
            let range = indptr.outer_inds_sz(i);
            let row = &vals[range];
            let slots = &self.gram_slots[self.gram_offsets[i]..self.gram_offsets[i + 1]];
            let r = row.len();
            for p in 0..r {
                let wp = wi * row[p];
                for q in 0..r {
                    out[slots[p * r + q]] += wp * row[q];
                }
            }
        }
        h
    }
}

impl SurveyModel {
    pub fn new(spec: ModelSpec, data: SurveyDataset, mesh: &TriMesh) -> Result<Self> {
        spec.validate()?;
        data.validate()?;
        if spec.covariate_names != data.covariate_names {
            return Err(Error::invalid(format!(
                "model covariates {:?} differ from dataset covariates {:?}",
                spec.covariate_names, data.covariate_names
            )));
        }
        let counts = data.count_by_source();
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!("no observations for source {}", j + 1)));
        }
        let projector = Projector::new(mesh, &data.locations());
        if let Some(i) = projector.inside.iter().position(|&b| !b) {
            return Err(Error::invalid(format!("site `{}` lies outside the mesh", data.sites[i].id)));
        }
        let basis = SpdeBasis::new(mesh)?;
        let layout = spec.layout(mesh.n_nodes());

        let assembly = Assembly::new(&spec, &layout, &data, &projector, &basis)?;
        let symbolic = Arc::new(EnvelopeSymbolic::reverse_cuthill_mckee(&assembly.pattern, &layout.dense())?);

        let edges = mesh.edges();
        let min_edge = edges
            .iter()
            .map(|&(a, b)| mesh.nodes[a].dist(&mesh.nodes[b]))
            .fold(f64::INFINITY, f64::min);
        let (lo, hi) = mesh.nodes.iter().fold(
            ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
            |(lo, hi), p| ([lo[0].min(p.x), lo[1].min(p.y)], [hi[0].max(p.x), hi[1].max(p.y)]),
        );
        let diameter = (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
        let bounds = HyperBounds {
            log_rho: ((0.1 * min_edge).ln(), (20.0 * diameter).ln()),
            log_sigma: (1e-4f64.ln(), 20f64.ln()),
            log_tau: (-15.0, 20.0),
            psi: (-10.0, 10.0),
        };
        Ok(Self {
            spec,
            data,
            basis,
            projector,
            layout,
            symbolic,
            bounds,
            assembly,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &SurveyDataset {
        &self.data
    }

    pub fn layout(&self) -> LatentLayout {
        self.layout
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn basis(&self) -> &SpdeBasis {
        &self.basis
    }

    /// Decode a flat latent/hyper pair.
    pub fn decode(&self, theta: &[f64], x: &[f64]) -> Result<(HyperVector, LatentVector)> {
        Ok((
            HyperVector::from_slice(self.spec.variant, theta)?,
            LatentVector::from_flat(&self.layout, x)?,
        ))
    }

    /// Linear predictors of the observations for a flat latent/hyper pair.
    pub fn predictors(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let (h, l) = self.decode(theta, x)?;
        linear_predictors(&self.spec, &l, &h, &self.data, &self.projector)
    }

    /// Full log joint for a flat latent/hyper pair.
    pub fn log_joint_flat(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let (h, l) = self.decode(theta, x)?;
        log_joint(&self.spec, &l, &h, &self.data, &self.basis, &self.projector)
    }

    fn check_bounds(&self, h: &HyperVector) -> Result<()> {
        let b = &self.bounds;
        let inside = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        let mut ok = inside(h.log_rho1, b.log_rho) && inside(h.log_sigma1, b.log_sigma);
        ok &= h.log_tau.iter().all(|&t| inside(t, b.log_tau));
        if let Some(psi) = h.psi {
            ok &= psi.iter().all(|&p| inside(p, b.psi));
        }
        if let (Some(r), Some(s)) = (h.log_rho2, h.log_sigma2) {
            ok &= inside(r, b.log_rho) && inside(s, b.log_sigma);
        }
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("hyperparameters outside the admissible box: {:?}", h.to_vec())))
        }
    }

    /// Named parameters reported in posterior summaries:
    /// `beta0.., zeta2..4, [psi2..4], rho1, sigma1, [rho2, sigma2]`.
    pub fn summary_names(&self) -> Vec<String> {
        let mut names = vec!["beta0".to_string()];
        names.extend(self.spec.covariate_names.iter().map(|c| format!("beta_{c}")));
        names.extend(["zeta2", "zeta3", "zeta4"].map(String::from));
        if self.spec.variant.has_psi() {
            names.extend(["psi2", "psi3", "psi4"].map(String::from));
        }
        names.extend(["rho1", "sigma1"].map(String::from));
        if self.spec.variant.has_second_field() {
            names.extend(["rho2", "sigma2"].map(String::from));
        }
        names
    }

    pub fn summary_values(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = x[self.layout.beta()].to_vec();
        v.extend(x[self.layout.log_zeta()].iter().map(|l| l.exp()));
        if self.spec.variant.has_psi() {
            v.extend_from_slice(&theta[5..8]);
        }
        v.push(theta[0].exp());
        v.push(theta[1].exp());
        if self.spec.variant.has_second_field() {
            v.push(theta[8].exp());
            v.push(theta[9].exp());
        }
        v
    }
}

fn default_probe(variant: ModelVariant) -> Vec<f64> {
    let mut t = vec![0.0; variant.hyper_dim()];
    if variant.has_psi() {
        t[5..8].copy_from_slice(&[1.0, 1.0, 1.0]);
    }
    t
}

fn site_extent(data: &SurveyDataset) -> ([f64; 2], [f64; 2]) {
    data.sites.iter().fold(
        ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
        |(lo, hi), s| {
            let p = s.location;
            ([lo[0].min(p.x), lo[1].min(p.y)], [hi[0].max(p.x), hi[1].max(p.y)])
        },
    )
}

/// Per-hyperparameter state shared by all Newton iterations.
pub struct SurveyConditional<'a> {
    model: &'a SurveyModel,
    design: SparseMatrix,
    prior: SparseMatrix,
    /// log p(theta) + prior normalising constants + ½ log|Q|
    constant: f64,
}

impl ConditionalDensity for SurveyConditional<'_> {
    fn log_density(&self, x: &[f64]) -> Result<f64> {
        let eta = sparse::mat_vec(&self.design, x);
        let mut lp = self.constant;
        for (i, (o, e)) in self.model.data.observations.iter().zip(&eta).enumerate() {
            if !e.is_finite() || !e.exp().is_finite() {
                return Err(Error::NonFinitePredictor { index: i });
            }
            lp += poisson_logpmf(o.y, *e);
        }
        Ok(lp - 0.5 * sparse::quad_form(&self.prior, x))
    }

    fn gradient_hessian(&self, x: &[f64]) -> Result<(Vec<f64>, SparseMatrix)> {
        let eta = sparse::mat_vec(&self.design, x);
        let mut resid = Vec::with_capacity(eta.len());
        let mut mu = Vec::with_capacity(eta.len());
        for (i, (o, e)) in self.model.data.observations.iter().zip(&eta).enumerate() {
            let m = e.exp();
            if !m.is_finite() {
                return Err(Error::NonFinitePredictor { index: i });
            }
            resid.push(o.y - m);
            mu.push(m);
        }
        let mut grad = sparse::mat_t_vec(&self.design, &resid);
        for (g, qx) in grad.iter_mut().zip(sparse::mat_vec(&self.prior, x)) {
            *g -= qx;
        }
        Ok((grad, self.model.assembly.hessian(&self.design, &self.prior, &mu)))
    }
}

impl LatentGaussianModel for SurveyModel {
    type Conditional<'a> = SurveyConditional<'a>;

    fn hyper_dim(&self) -> usize {
        self.spec.variant.hyper_dim()
    }

    fn latent_dim(&self) -> usize {
        self.layout.dim()
    }

    fn condition(&self, theta: &[f64]) -> Result<SurveyConditional<'_>> {
        let h = HyperVector::from_slice(self.spec.variant, theta)?;
        self.check_bounds(&h)?;
        let design = self.assembly.design(&h);
        let prior = self.assembly.prior(&self.spec, &h, &self.basis)?;
        let mut constant = hyperprior_logpdf(&self.spec, &h)?;
        let two_pi = (2.0 * PI).ln();
        let n = self.layout.n_nodes as f64;
        let q1 = self.basis.precision(&h.field1()?);
        constant += -0.5 * n * two_pi + 0.5 * q1.cholesky()?.log_det();
        if let Some(f2) = h.field2()? {
            let q2 = self.basis.precision(&f2);
            constant += -0.5 * n * two_pi + 0.5 * q2.cholesky()?.log_det();
        }
        let pb = self.spec.priors.beta_precision;
        constant += self.layout.n_beta as f64 * 0.5 * (pb.ln() - two_pi);
        for lt in h.log_tau {
            constant += 0.5 * (lt - two_pi);
        }
        Ok(SurveyConditional {
            model: self,
            design,
            prior,
            constant,
        })
    }

    fn initial_latent(&self) -> Vec<f64> {
        let means = self.data.mean_by_source();
        let floor = |m: f64| m.max(1e-3);
        let mut x = vec![0.0; self.layout.dim()];
        x[0] = floor(means[0]).ln();
        let lz = self.layout.log_zeta().start;
        for j in 1..4 {
            x[lz + j - 1] = (floor(means[j]) / floor(means[0])).ln();
        }
        x
    }

    fn symbolic(&self) -> Arc<EnvelopeSymbolic> {
        self.symbolic.clone()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.summary_names()
    }

    fn parameter_values(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.summary_values(theta, x)
    }

    fn default_hyper(&self) -> Vec<f64> {
        let init = self.initial_latent();
        let lz = &init[self.layout.log_zeta()];
        let pr = &self.spec.priors;
        let (lo, hi) = site_extent(&self.data);
        let extent = (hi[0] - lo[0]).hypot(hi[1] - lo[1]);
        let rho_start = |p: &PcPriorSpec| p.median_rho().min(0.25 * extent).max(p.rho0.min(0.25 * extent));
        let mut t = vec![rho_start(&pr.field1).ln(), 0.5f64.ln()];
        for v in lz {
            // conditional mode of tau given the initial log zeta
            let rate = pr.tau_rate + 0.5 * v * v;
            t.push(((pr.tau_shape + 0.5) / rate).ln().clamp(-10.0, 15.0));
        }
        if self.spec.variant.has_psi() {
            t.extend([1.0, 1.0, 1.0]);
        }
        if let (true, Some(p2)) = (self.spec.variant.has_second_field(), &pr.field2) {
            t.push(rho_start(p2).ln());
            t.push(0.3f64.ln());
        }
        t
    }

    fn hyper_steps(&self) -> Vec<f64> {
        let mut s = vec![0.7, 0.5, 1.0, 1.0, 1.0];
        if self.spec.variant.has_psi() {
            s.extend([0.3, 0.3, 0.3]);
        }
        if self.spec.variant.has_second_field() {
            s.extend([0.7, 0.7]);
        }
        s
    }
}

//! Synthetic two-country surveys and the replicate recovery study.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assessment::bias_rmse;
use crate::error::{Error, Result};
use crate::inference::{self, FitConfig, LatentGaussianModel, PosteriorFit};
use crate::io::{extract_covariates, CovariateRaster, Standardization};
use crate::mesh::{build_mesh, DomainSpec, Point2, Projector, TriMesh};
use crate::model::{Country, ModelSpec, ModelVariant, Observation, PriorSpec, Site, Source, SurveyDataset, SurveyModel};
use crate::sparse::EnvelopeCholesky;
use crate::spde::{sample_with_factor, MaternParams, SpdeBasis};

/// Generator settings for one simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    /// 1: proportional intensities; 2: source-specific field scaling.
    pub scenario: u8,
    pub beta0: f64,
    pub beta1: f64,
    pub rho: f64,
    pub sigma2: f64,
    pub zeta_star: [f64; 4],
    pub psi_star: [f64; 4],
    pub n_sites_a: usize,
    pub n_sites_b: usize,
    /// Domain is `[0, width] x [0, height]`; country A lies west of `split_x`.
    pub width: f64,
    pub height: f64,
    pub split_x: f64,
    pub raster_cell: f64,
    pub max_edge_inner: f64,
    pub max_edge_outer: f64,
    pub buffer: f64,
    pub replicates: usize,
    pub base_seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            scenario: 1,
            beta0: 4.70,
            beta1: -0.20,
            rho: 15_000.0,
            sigma2: 0.14,
            zeta_star: [0.91, 0.04, 0.57, 1.72],
            psi_star: [1.0, 1.57, 1.09, 1.21],
            n_sites_a: 113,
            n_sites_b: 70,
            width: 150_000.0,
            height: 100_000.0,
            split_x: 90_000.0,
            raster_cell: 2_000.0,
            max_edge_inner: 7_500.0,
            max_edge_outer: 20_000.0,
            buffer: 30_000.0,
            replicates: 100,
            base_seed: 2024,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scenario, 1 | 2) {
            return Err(Error::invalid(format!("scenario must be 1 or 2, got {}", self.scenario)));
        }
        if self.zeta_star.iter().any(|z| !(*z > 0.0)) {
            return Err(Error::invalid("all zeta* must be positive"));
        }
        if !(self.rho > 0.0) || !(self.sigma2 > 0.0) {
            return Err(Error::invalid("rho and sigma2 must be positive"));
        }
        if !(self.split_x > 0.0 && self.split_x < self.width) || !(self.height > 0.0) {
            return Err(Error::invalid("split_x must lie inside the domain"));
        }
        if self.n_sites_a == 0 || self.n_sites_b == 0 {
            return Err(Error::invalid("both countries need sites"));
        }
        if self.psi_star.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("psi* must be finite"));
        }
        Ok(())
    }

    pub fn domain(&self) -> DomainSpec {
        DomainSpec::rectangle(
            0.0,
            0.0,
            self.width,
            self.height,
            self.max_edge_inner,
            self.max_edge_outer,
            self.buffer,
        )
    }

    /// Intensity multipliers: `psi*` only acts in scenario 2.
    pub fn effective_psi(&self) -> [f64; 4] {
        if self.scenario == 2 {
            self.psi_star
        } else {
            [1.0; 4]
        }
    }
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Quasi-random site layout: a Halton sequence (bases 2, 3) scattered over the
/// domain with a 2% margin, assigned to countries by `split_x`. The seed skips
/// a prefix of the sequence.
pub fn synthetic_sites(spec: &ScenarioSpec, seed: u64) -> Vec<Site> {
    let mx = 0.02 * spec.width;
    let my = 0.02 * spec.height;
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut i = 1 + (seed % 997) as usize;
    while a.len() < spec.n_sites_a || b.len() < spec.n_sites_b {
        let p = Point2::new(
            mx + (spec.width - 2.0 * mx) * halton(i, 2),
            my + (spec.height - 2.0 * my) * halton(i, 3),
        );
        i += 1;
        if p.x < spec.split_x {
            if a.len() < spec.n_sites_a {
                a.push(p);
            }
        } else if b.len() < spec.n_sites_b {
            b.push(p);
        }
    }
    let mut sites: Vec<Site> = a
        .into_iter()
        .enumerate()
        .map(|(k, p)| Site {
            id: format!("A{:03}", k + 1),
            location: p,
            country: Country::A,
        })
        .collect();
    sites.extend(b.into_iter().enumerate().map(|(k, p)| Site {
        id: format!("B{:03}", k + 1),
        location: p,
        country: Country::B,
    }));
    sites
}

/// Smooth synthetic precipitation surface: three fixed cosine ridges.
pub fn prec_surface(spec: &ScenarioSpec) -> Result<CovariateRaster> {
    let ncols = (spec.width / spec.raster_cell).ceil() as usize;
    let nrows = (spec.height / spec.raster_cell).ceil() as usize;
    let mut r = CovariateRaster::new("PREC", 0.0, 0.0, spec.raster_cell, ncols, nrows, -9999.0)?;
    let tau = std::f64::consts::TAU;
    for k in 0..r.len() {
        let c = r.cell_center(k);
        let (u, v) = (c.x / spec.width, c.y / spec.height);
        r.values[k] = 1200.0
            + 300.0 * (tau * (0.8 * u + 0.3 * v) + 0.4).cos()
            + 200.0 * (tau * (-0.4 * u + 1.1 * v) + 1.3).cos()
            + 120.0 * (tau * (1.7 * u + 0.6 * v) + 2.1).cos();
    }
    Ok(r)
}

/// Fixed ingredients shared by all replicates: sites, covariate, mesh.
pub struct SimWorld {
    pub spec: ScenarioSpec,
    pub sites: Vec<Site>,
    pub prec: CovariateRaster,
    pub covariates: Vec<Vec<f64>>,
    pub standardization: Standardization,
    pub mesh: TriMesh,
    projector: Projector,
    field_factor: EnvelopeCholesky,
}

impl SimWorld {
    pub fn new(spec: &ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let sites = synthetic_sites(spec, spec.base_seed);
        let prec = prec_surface(spec)?;
        let (covariates, standardization) = extract_covariates(std::slice::from_ref(&prec), &sites)?;
        let mesh = build_mesh(&spec.domain())?;
        let projector = Projector::new(&mesh, &sites.iter().map(|s| s.location).collect::<Vec<_>>());
        let basis = SpdeBasis::new(&mesh)?;
        let field_factor = basis.precision(&MaternParams::new(spec.rho, spec.sigma2.sqrt())?).cholesky()?;
        Ok(Self {
            spec: spec.clone(),
            sites,
            prec,
            covariates,
            standardization,
            mesh,
            projector,
            field_factor,
        })
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }
}

/// Realised latent truth for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub omega_nodes: Vec<f64>,
    pub omega_sites: Vec<f64>,
    /// `log lambda_true` at the sites.
    pub log_lambda: Vec<f64>,
}

/// Draw `omega_1` and form `log lambda_true = beta0 + beta1 PREC + omega_1`.
pub fn simulate_truth(world: &SimWorld, seed: u64) -> Truth {
    let spec = &world.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega_nodes = sample_with_factor(&world.field_factor, &mut rng);
    let omega_sites = world.projector.apply(&omega_nodes);
    let log_lambda = world
        .covariates
        .iter()
        .zip(&omega_sites)
        .map(|(x, w)| spec.beta0 + spec.beta1 * x[0] + w)
        .collect();
    Truth {
        omega_nodes,
        omega_sites,
        log_lambda,
    }
}

/// Poisson counts per source: `lambda_j = zeta*_j lambda_true exp((psi*_j - 1) omega_1)`,
/// sources 1-2 at country-A sites and 3-4 at country-B sites.
pub fn simulate_observations(spec: &ScenarioSpec, sites: &[Site], covariates: &[Vec<f64>], truth: &Truth, seed: u64) -> Result<SurveyDataset> {
    let psi = spec.effective_psi();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observations = Vec::with_capacity(2 * sites.len());
    for (i, site) in sites.iter().enumerate() {
        let sources: [u8; 2] = match site.country {
            Country::A => [1, 2],
            Country::B => [3, 4],
        };
        for j in sources {
            let source = Source::new(j)?;
            let k = source.index();
            let lambda = spec.zeta_star[k] * (truth.log_lambda[i] + (psi[k] - 1.0) * truth.omega_sites[i]).exp();
            observations.push(Observation {
                site: i,
                source,
                y: poisson_draw(lambda, &mut rng)?,
            });
        }
    }
    Ok(SurveyDataset {
        sites: sites.to_vec(),
        observations,
        covariate_names: vec!["PREC".to_string()],
        covariates: covariates.to_vec(),
        source_labels: SurveyDataset::default_labels(),
    })
}

fn poisson_draw(lambda: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let d = Poisson::new(lambda).map_err(|e| Error::Numerical(format!("Poisson({lambda}): {e}")))?;
    Ok(d.sample(rng))
}

/// Independent stream seed for (base, replicate, purpose).
pub fn replicate_seed(base: u64, replicate: usize, purpose: u64) -> u64 {
    // splitmix64 finaliser over a packed key
    let mut z = base
        .wrapping_add((replicate as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(purpose.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dataset of replicate `k` for the world's scenario.
pub fn replicate_dataset(world: &SimWorld, k: usize) -> Result<(Truth, SurveyDataset)> {
    let base = world.spec.base_seed;
    let truth = simulate_truth(world, replicate_seed(base, k, 0));
    let data = simulate_observations(&world.spec, &world.sites, &world.covariates, &truth, replicate_seed(base, k, 1))?;
    Ok((truth, data))
}

/// Priors used by the study fits.
pub fn study_priors() -> PriorSpec {
    PriorSpec::default()
}

const WARM_STEP_SCALE: f64 = 0.3;

/// Fit one variant, warm-starting from the previous variant's mode.
pub fn fit_variant(
    variant: ModelVariant,
    data: &SurveyDataset,
    mesh: &TriMesh,
    priors: &PriorSpec,
    cfg: &FitConfig,
    previous: Option<&[f64]>,
) -> Result<(SurveyModel, PosteriorFit)> {
    let mut spec = ModelSpec::new(variant, data.covariate_names.clone());
    spec.priors = priors.clone();
    let model = SurveyModel::new(spec, data.clone(), mesh)?;
    let mut cfg = cfg.clone();
    if let (None, Some(p)) = (&cfg.start, previous) {
        cfg.start = Some(extend_start(&model, p));
        // transferred coordinates are already near their optimum
        let mut steps = cfg.steps.clone().unwrap_or_else(|| model.hyper_steps());
        for s in steps.iter_mut().take(p.len()) {
            *s *= WARM_STEP_SCALE;
        }
        cfg.steps = Some(steps);
    }
    let fit = inference::fit(&model, &cfg)?;
    Ok((model, fit))
}

/// Embed a lower-variant mode into `model`'s hyperparameter space.
pub fn extend_start(model: &SurveyModel, previous: &[f64]) -> Vec<f64> {
    let mut start = model.default_hyper();
    let n = previous.len().min(start.len());
    start[..n].copy_from_slice(&previous[..n]);
    start
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenarios: Vec<u8>,
    pub models: Vec<ModelVariant>,
    pub fit: FitConfig,
    /// Posterior draws per fit used for bias and RMSE.
    pub n_samples: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![1, 2],
            models: ModelVariant::ALL.to_vec(),
            fit: FitConfig {
                n_samples: 0,
                ..FitConfig::default()
            },
            n_samples: 10_000,
        }
    }
}

/// Outcome of one (scenario, replicate, model) fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub scenario: u8,
    pub replicate: usize,
    pub model: ModelVariant,
    pub ok: bool,
    pub message: Option<String>,
    /// `(parameter, bias, rmse)`
    pub scores: Vec<(String, f64, f64)>,
    /// Posterior means, same order as `scores`.
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scenario: u8,
    pub model: ModelVariant,
    pub parameter: String,
    pub mean_bias: f64,
    pub se_bias: f64,
    pub mean_rmse: f64,
    pub se_rmse: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStudyReport {
    pub rows: Vec<StudyRow>,
    pub outcomes: Vec<ReplicateOutcome>,
}

/// Names and true values of the scored parameters for a variant.
pub fn scored_parameters(spec: &ScenarioSpec, variant: ModelVariant) -> Vec<(String, f64)> {
    let mut p = vec![
        ("zeta_star2".to_string(), spec.zeta_star[1]),
        ("zeta_star3".to_string(), spec.zeta_star[2]),
        ("zeta_star4".to_string(), spec.zeta_star[3]),
        ("zeta2".to_string(), spec.zeta_star[1] / spec.zeta_star[0]),
        ("zeta3".to_string(), spec.zeta_star[2] / spec.zeta_star[0]),
        ("zeta4".to_string(), spec.zeta_star[3] / spec.zeta_star[0]),
        ("beta0".to_string(), spec.beta0),
        ("beta1".to_string(), spec.beta1),
        ("rho".to_string(), spec.rho),
        ("sigma".to_string(), spec.sigma2.sqrt()),
    ];
    if variant.has_psi() {
        let psi = spec.effective_psi();
        for j in 1..4 {
            p.push((format!("psi{}", j + 1), psi[j]));
        }
    }
    p
}

/// Map a posterior draw to the scored parameters. `zeta*_j` is reconstructed
/// as `zeta_j zeta*_1` with `zeta*_1` fixed at its true value; the raw
/// `zeta_j` are scored against `zeta*_j / zeta*_1`. The intercept estimates
/// `beta0 + ln zeta*_1` and is scored against `beta0`.
pub fn scored_values(model: &SurveyModel, spec: &ScenarioSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let layout = model.layout();
    let lz = &x[layout.log_zeta()];
    let mut v = vec![
        lz[0].exp() * spec.zeta_star[0],
        lz[1].exp() * spec.zeta_star[0],
        lz[2].exp() * spec.zeta_star[0],
        lz[0].exp(),
        lz[1].exp(),
        lz[2].exp(),
        x[0],
        x[1],
        theta[0].exp(),
        theta[1].exp(),
    ];
    if model.spec().variant.has_psi() {
        v.extend_from_slice(&theta[5..8]);
    }
    v
}

/// Score one fitted replicate against the generator values.
pub fn score_fit(model: &SurveyModel, fit: &PosteriorFit, spec: &ScenarioSpec, n_samples: usize, seed: u64) -> Result<(Vec<(String, f64, f64)>, Vec<f64>)> {
    let params = scored_parameters(spec, model.spec().variant);
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); params.len()];
    inference::for_each_sample(fit, n_samples, seed, |theta, x| {
        for (d, v) in draws.iter_mut().zip(scored_values(model, spec, theta, x)) {
            d.push(v);
        }
        Ok(())
    })?;
    let mut scores = Vec::with_capacity(params.len());
    let mut means = Vec::with_capacity(params.len());
    for ((name, truth), d) in params.into_iter().zip(&draws) {
        let (bias, rmse) = bias_rmse(d, truth)?;
        scores.push((name, bias, rmse));
        means.push(d.iter().sum::<f64>() / d.len() as f64);
    }
    Ok((scores, means))
}

fn run_replicate(
    world: &SimWorld,
    k: usize,
    priors: &PriorSpec,
    cfg: &StudyConfig,
    progress: &(impl Fn(&ReplicateOutcome) + Sync),
) -> Result<Vec<ReplicateOutcome>> {
    let spec = &world.spec;
    let (_, data) = replicate_dataset(world, k)?;
    let mut previous: Option<Vec<f64>> = None;
    let mut outcomes = Vec::with_capacity(cfg.models.len());
    for &variant in &cfg.models {
        let res = fit_variant(variant, &data, &world.mesh, priors, &cfg.fit, previous.as_deref()).and_then(|(model, fit)| {
            let seed = replicate_seed(spec.base_seed, k, 2 + variant.number() as u64);
            let (scores, means) = score_fit(&model, &fit, spec, cfg.n_samples, seed)?;
            Ok((fit.hyper_mode.clone(), scores, means))
        });
        let outcome = match res {
            Ok((mode, scores, means)) => {
                previous = Some(mode);
                ReplicateOutcome {
                    scenario: spec.scenario,
                    replicate: k,
                    model: variant,
                    ok: true,
                    message: None,
                    scores,
                    means,
                }
            }
            Err(e) => ReplicateOutcome {
                scenario: spec.scenario,
                replicate: k,
                model: variant,
                ok: false,
                message: Some(e.to_string()),
                scores: Vec::new(),
                means: Vec::new(),
            },
        };
        progress(&outcome);
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Run all replicates of the configured scenarios and models. `progress`
/// is called after each fit.
pub fn run_study(spec: &ScenarioSpec, cfg: &StudyConfig, progress: impl Fn(&ReplicateOutcome) + Sync) -> Result<SimStudyReport> {
    if spec.replicates == 0 {
        return Err(Error::invalid("at least one replicate is required"));
    }
    if cfg.n_samples == 0 {
        return Err(Error::invalid("at least one posterior sample is required"));
    }
    let priors = study_priors();
    let mut outcomes = Vec::new();
    for &scenario in &cfg.scenarios {
        let spec = ScenarioSpec {
            scenario,
            ..spec.clone()
        };
        let world = SimWorld::new(&spec)?;
        // replicates are independent; the ordered collect keeps aggregation
        // independent of scheduling
        let per_replicate: Vec<Vec<ReplicateOutcome>> = (0..spec.replicates)
            .into_par_iter()
            .map(|k| run_replicate(&world, k, &priors, cfg, &progress))
            .collect::<Result<_>>()?;
        outcomes.extend(per_replicate.into_iter().flatten());
    }
    Ok(SimStudyReport {
        rows: aggregate(&outcomes, spec, &cfg.models),
        outcomes,
    })
}

/// Cross-replicate means and standard errors over successful fits.
pub fn aggregate(outcomes: &[ReplicateOutcome], spec: &ScenarioSpec, models: &[ModelVariant]) -> Vec<StudyRow> {
    let mut scenarios: Vec<u8> = outcomes.iter().map(|o| o.scenario).collect();
    scenarios.dedup();
    let mut rows = Vec::new();
    for &scenario in &scenarios {
        for &model in models {
            let ok: Vec<&ReplicateOutcome> = outcomes
                .iter()
                .filter(|o| o.scenario == scenario && o.model == model && o.ok)
                .collect();
            for (p, (name, _)) in scored_parameters(spec, model).into_iter().enumerate() {
                let bias: Vec<f64> = ok.iter().map(|o| o.scores[p].1).collect();
                let rmse: Vec<f64> = ok.iter().map(|o| o.scores[p].2).collect();
                let (mb, sb) = mean_se(&bias);
                let (mr, sr) = mean_se(&rmse);
                rows.push(StudyRow {
                    scenario,
                    model,
                    parameter: name,
                    mean_bias: mb,
                    se_bias: sb,
                    mean_rmse: mr,
                    se_rmse: sr,
                    n_ok: ok.len(),
                });
            }
        }
    }
    rows
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

impl SimStudyReport {
    pub fn row(&self, scenario: u8, model: ModelVariant, parameter: &str) -> Option<&StudyRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.model == model && r.parameter == parameter)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,model,parameter,mean_bias,se_bias,mean_rmse,se_rmse,n_ok\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.scenario, r.model, r.parameter, r.mean_bias, r.se_bias, r.mean_rmse, r.se_rmse, r.n_ok
            );
        }
        s
    }

    /// Bias and RMSE side by side per parameter, one column pair per model.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let mut scenarios: Vec<u8> = self.rows.iter().map(|r| r.scenario).collect();
        scenarios.dedup();
        for sc in scenarios {
            let models: Vec<ModelVariant> = ModelVariant::ALL
                .into_iter()
                .filter(|m| self.rows.iter().any(|r| r.scenario == sc && r.model == *m))
                .collect();
            let _ = writeln!(s, "Scenario {sc}");
            let _ = write!(s, "{:<12}", "Parameter");
            for m in &models {
                let _ = write!(s, " {:>10} {:>10}", format!("{m} bias"), format!("{m} RMSE"));
            }
            s.push('\n');
            let mut params: Vec<&str> = Vec::new();
            for r in self.rows.iter().filter(|r| r.scenario == sc) {
                if !params.contains(&r.parameter.as_str()) {
                    params.push(&r.parameter);
                }
            }
            for p in params {
                let _ = write!(s, "{p:<12}");
                for m in &models {
                    match self.row(sc, *m, p) {
                        Some(r) => {
                            let _ = write!(s, " {:>10} {:>10}", fmt_num(r.mean_bias), fmt_num(r.mean_rmse));
                        }
                        None => {
                            let _ = write!(s, " {:>10} {:>10}", "-", "-");
                        }
                    }
                }
                s.push('\n');
            }
            let failed = self.outcomes.iter().filter(|o| o.scenario == sc && !o.ok).count();
            let _ = writeln!(s, "failed fits: {failed}\n");
        }
        s
    }
}

fn fmt_num(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests;

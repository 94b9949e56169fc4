use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use multisurvey::assessment::{self, AssessConfig};
use multisurvey::inference::{self, PosteriorFit};
use multisurvey::io::{self, CovariateRaster, Standardization};
use multisurvey::mesh::{build_mesh, DomainSpec, TriMesh};
use multisurvey::model::{ModelSpec, ModelVariant, PriorSpec, SurveyDataset, SurveyModel};
use multisurvey::predict::predict_grid;
use multisurvey::sim::{self, ScenarioSpec, SimWorld, StudyConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Run};

/// Everything needed to rebuild a fitted model without refitting.
#[derive(Debug, Serialize, Deserialize)]
struct FitState {
    variant: ModelVariant,
    covariate_names: Vec<String>,
    priors: PriorSpec,
    n_nodes: usize,
    n_observations: usize,
    fit: PosteriorFit,
}

#[derive(Debug, Serialize)]
struct FitSummary<'a> {
    model: ModelVariant,
    converged: bool,
    evaluations: usize,
    log_posterior_at_mode: f64,
    hyper_mode: BTreeMap<&'a str, f64>,
    parameters: &'a [inference::ParamSummary],
}

#[derive(Debug, Serialize)]
struct Truth<'a> {
    scenario: &'a ScenarioSpec,
    replicate: usize,
    site_ids: Vec<&'a str>,
    omega_sites: &'a [f64],
    log_lambda: &'a [f64],
}

#[derive(Debug, Serialize)]
struct Screening {
    threshold: f64,
    covariates: Vec<String>,
    kept: Vec<String>,
    dropped: Vec<String>,
    /// Pearson correlations over the sampled grid cells.
    correlation: Vec<Vec<f64>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    version: String,
    runs: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    seed: u64,
    config_sha256: String,
    outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Record the effective config hash, seed and output digests of this run in
/// `run_manifest.json`, keeping entries of other commands.
pub fn write_manifest(run: &Run, outputs: &[String]) -> Result<(), CliError> {
    let path = run.out.join("run_manifest.json");
    let mut manifest: Manifest = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => Manifest::default(),
    };
    manifest.version = env!("CARGO_PKG_VERSION").to_string();
    let mut digests = BTreeMap::new();
    for name in outputs {
        let p = run.out.join(name);
        let bytes = std::fs::read(&p).map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
        digests.insert(name.clone(), sha256_hex(&bytes));
    }
    manifest.runs.insert(
        run.command.to_string(),
        ManifestEntry {
            seed: run.seed,
            config_sha256: run.config_sha256.clone(),
            outputs: digests,
        },
    );
    write_json(&path, &manifest)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Input(format!("config field `{key}` is required for this command")))
}

fn load_dataset(run: &Run) -> Result<SurveyDataset, CliError> {
    Ok(io::read_dataset(required(&run.config.data.dataset, "data.dataset")?)?)
}

fn load_mesh(run: &Run, data: &SurveyDataset) -> Result<TriMesh, CliError> {
    if let Some(p) = &run.config.data.mesh {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
        return Ok(TriMesh::from_text(&text)?);
    }
    let m = &run.config.mesh;
    let [x0, y0, x1, y1] = match m.domain {
        Some(d) => d,
        None => {
            let pts = data.locations();
            let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&multisurvey::mesh::Point2) -> f64| {
                pts.iter().map(g).fold(init, f)
            };
            [
                fold(f64::min, f64::INFINITY, |p| p.x),
                fold(f64::min, f64::INFINITY, |p| p.y),
                fold(f64::max, f64::NEG_INFINITY, |p| p.x),
                fold(f64::max, f64::NEG_INFINITY, |p| p.y),
            ]
        }
    };
    let extent = (x1 - x0).max(y1 - y0);
    if extent.is_nan() || extent <= 0.0 {
        return Err(CliError::Input("mesh domain has zero extent; set `mesh.domain`".into()));
    }
    let inner = m.max_edge_inner.unwrap_or(extent / 10.0);
    let domain = DomainSpec::rectangle(
        x0,
        y0,
        x1,
        y1,
        inner,
        m.max_edge_outer.unwrap_or(2.0 * inner),
        m.buffer.unwrap_or(extent / 4.0),
    );
    Ok(build_mesh(&domain)?)
}

fn load_grids(run: &Run) -> Result<Vec<CovariateRaster>, CliError> {
    if run.config.data.grids.is_empty() {
        return Err(CliError::Input("config field `data.grids` lists no rasters".into()));
    }
    run.config
        .data
        .grids
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(CovariateRaster::read(p, name)?)
        })
        .collect()
}

fn build_model(run: &Run, variant: ModelVariant, data: SurveyDataset, mesh: &TriMesh) -> Result<SurveyModel, CliError> {
    let mut spec = ModelSpec::new(variant, data.covariate_names.clone());
    spec.priors = run.config.priors.clone();
    Ok(SurveyModel::new(spec, data, mesh)?)
}

/// Rebuild the model of a saved fit and refactorise its design points.
fn load_fit(run: &Run) -> Result<(SurveyModel, PosteriorFit, TriMesh), CliError> {
    let path = run
        .config
        .data
        .fit_state
        .clone()
        .unwrap_or_else(|| run.out.join("fit_state.json"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Input(format!("cannot read fit state {}: {e}", path.display())))?;
    let state: FitState =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let data = load_dataset(run)?;
    let mesh = load_mesh(run, &data)?;
    if state.covariate_names != data.covariate_names
        || state.n_nodes != mesh.n_nodes()
        || state.n_observations != data.observations.len()
        || state.priors != run.config.priors
    {
        return Err(CliError::Input(format!(
            "fit state {} does not match the configured dataset, mesh or priors",
            path.display()
        )));
    }
    let model = build_model(run, state.variant, data, &mesh)?;
    let mut fit = state.fit;
    fit.restore_factors(&model)?;
    Ok((model, fit, mesh))
}

pub fn simulate(run: &Run) -> Result<Vec<String>, CliError> {
    let spec = ScenarioSpec {
        base_seed: run.seed,
        ..run.config.scenario.clone()
    };
    let world = SimWorld::new(&spec)?;
    let k = run.config.simulate.replicate;
    let (truth, data) = sim::replicate_dataset(&world, k)?;
    io::write_dataset(&run.out.join("dataset.csv"), &data)?;
    world.prec.write(&run.out.join(format!("{}.asc", world.prec.name)))?;
    write_text(&run.out.join("mesh.txt"), &world.mesh.to_text())?;
    write_json(
        &run.out.join("truth.json"),
        &Truth {
            scenario: &spec,
            replicate: k,
            site_ids: data.sites.iter().map(|s| s.id.as_str()).collect(),
            omega_sites: &truth.omega_sites,
            log_lambda: &truth.log_lambda,
        },
    )?;
    Ok(vec![
        "dataset.csv".into(),
        format!("{}.asc", world.prec.name),
        "mesh.txt".into(),
        "truth.json".into(),
    ])
}

pub fn fit(run: &Run) -> Result<Vec<String>, CliError> {
    let data = load_dataset(run)?;
    let mesh = load_mesh(run, &data)?;
    let n_observations = data.observations.len();
    let variant = run.config.model.variant;
    let model = build_model(run, variant, data, &mesh)?;
    let mut cfg = run.config.inference.clone();
    cfg.seed = run.seed;
    let fit = inference::fit(&model, &cfg)?;
    let names = multisurvey::model::HyperVector::names(variant);
    write_json(
        &run.out.join("fit_summary.json"),
        &FitSummary {
            model: variant,
            converged: fit.converged,
            evaluations: fit.evaluations,
            log_posterior_at_mode: fit.log_posterior_at_mode,
            hyper_mode: names.iter().copied().zip(fit.hyper_mode.iter().copied()).collect(),
            parameters: &fit.summaries,
        },
    )?;
    write_json(
        &run.out.join("fit_state.json"),
        &FitState {
            variant,
            covariate_names: model.spec().covariate_names.clone(),
            priors: run.config.priors.clone(),
            n_nodes: mesh.n_nodes(),
            n_observations,
            fit,
        },
    )?;
    Ok(vec!["fit_summary.json".into(), "fit_state.json".into()])
}

pub fn assess(run: &Run) -> Result<Vec<String>, CliError> {
    let (model, fit, _) = load_fit(run)?;
    let a = &run.config.assess;
    let cfg = AssessConfig {
        n_samples: a.n_samples,
        seed: run.seed,
        cv_threshold: a.cv_threshold,
        predictive_source: a.predictive_source,
    };
    let report = assessment::assess(&model, &fit, &cfg)?;
    if !report.unstable_cpo.is_empty() {
        eprintln!(
            "warning: {} observations have unstable CPO estimates",
            report.unstable_cpo.len()
        );
    }
    write_json(&run.out.join("assessment.json"), &report)?;
    write_text(&run.out.join("assessment.txt"), &assessment::comparison_table(&[report]))?;
    Ok(vec!["assessment.json".into(), "assessment.txt".into()])
}

pub fn predict(run: &Run) -> Result<Vec<String>, CliError> {
    let grids = load_grids(run)?;
    let (model, fit, mesh) = load_fit(run)?;
    let standardization = Standardization::from_rasters(&grids)?;
    let raster = predict_grid(
        &model,
        &fit,
        &grids,
        &standardization,
        &mesh,
        run.config.predict.n_samples,
        run.seed,
    )?;
    raster.write(&run.out)?;
    Ok(vec!["mean.asc".into(), "sd.asc".into(), "prediction.json".into()])
}

pub fn screen(run: &Run) -> Result<Vec<String>, CliError> {
    let grids = load_grids(run)?;
    let s = &run.config.screen;
    let columns = io::grid_sample(&grids, s.max_cells)?;
    let names: Vec<String> = grids.iter().map(|r| r.name.clone()).collect();
    let kept = io::screen_covariates(&names, &columns, s.threshold, &s.priority)?;
    let correlation = columns
        .iter()
        .map(|a| columns.iter().map(|b| io::pearson(a, b)).collect())
        .collect();
    write_json(
        &run.out.join("screen.json"),
        &Screening {
            threshold: s.threshold,
            dropped: names.iter().filter(|n| !kept.contains(n)).cloned().collect(),
            covariates: names,
            kept,
            correlation,
        },
    )?;
    Ok(vec!["screen.json".into()])
}

pub fn study(run: &Run) -> Result<Vec<String>, CliError> {
    let spec = ScenarioSpec {
        base_seed: run.seed,
        ..run.config.scenario.clone()
    };
    let b = &run.config.study;
    let cfg = StudyConfig {
        scenarios: b.scenarios.clone(),
        models: b.models.clone(),
        n_samples: b.n_samples,
        ..StudyConfig::default()
    };
    let report = sim::run_study(&spec, &cfg, |o| {
        let status = o.message.as_deref().unwrap_or("ok");
        eprintln!("scenario {} replicate {} {:?}: {status}", o.scenario, o.replicate, o.model);
    })?;
    write_text(&run.out.join("study.csv"), &report.to_csv())?;
    write_text(&run.out.join("study.txt"), &report.to_table())?;
    write_json(&run.out.join("study.json"), &report)?;
    Ok(vec!["study.csv".into(), "study.txt".into(), "study.json".into()])
}

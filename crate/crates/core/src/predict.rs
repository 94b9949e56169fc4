//! Posterior predictive surfaces of the reference-country total `Y_1 + Y_2`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, PosteriorFit};
use crate::io::{CovariateRaster, Standardization};
use crate::mesh::{Projector, TriMesh};
use crate::model::{ModelVariant, SurveyModel};
use crate::sparse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub model: ModelVariant,
    pub n_samples: usize,
    pub seed: u64,
    pub covariates: Vec<String>,
    pub predicted_cells: usize,
}

/// Mean and predictive standard deviation grids; cells outside the mesh or
/// with missing covariates hold the nodata value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRaster {
    pub mean: CovariateRaster,
    pub sd: CovariateRaster,
    pub meta: PredictionMeta,
}

/// Predict `Y_1(s) + Y_2(s)` on the grid of `covariates` (raw values; the
/// training standardization is applied here). Per draw,
/// `lambda_1 = exp(X beta + omega_1)` and `lambda_2 = exp(X beta + ln zeta_2 +
/// psi_2 omega_1 [+ omega_2])`; `mean = E[T]`, `sd = sqrt(E[T] + Var[T])` with
/// `T = lambda_1 + lambda_2`.
pub fn predict_grid(
    model: &SurveyModel,
    fit: &PosteriorFit,
    covariates: &[CovariateRaster],
    standardization: &Standardization,
    mesh: &TriMesh,
    n_samples: usize,
    seed: u64,
) -> Result<PredictionRaster> {
    let names = &model.spec().covariate_names;
    let given: Vec<&str> = covariates.iter().map(|r| r.name.as_str()).collect();
    if given != names.iter().map(String::as_str).collect::<Vec<_>>() || standardization.names != *names {
        return Err(Error::invalid(format!(
            "grid covariates {given:?} do not match the fitted covariates {names:?}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::invalid("prediction needs at least one posterior sample"));
    }
    let template = match covariates.first() {
        Some(r) => r.clone(),
        None => return Err(Error::invalid("prediction needs a covariate grid for its geometry")),
    };
    if covariates.iter().any(|r| !r.same_geometry(&template)) {
        return Err(Error::invalid("covariate grids differ in geometry"));
    }
    if mesh.n_nodes() != model.layout().n_nodes {
        return Err(Error::invalid("mesh does not match the fitted model"));
    }

    // cells with complete covariates inside the mesh
    let mut cells = Vec::new();
    let mut x = Vec::new();
    for k in 0..template.len() {
        let vals: Option<Vec<f64>> = covariates
            .iter()
            .enumerate()
            .map(|(c, r)| Some(r.values[k]).filter(|v| !r.is_nodata(*v)).map(|v| standardization.apply(c, v)))
            .collect();
        if let Some(v) = vals {
            cells.push(k);
            x.push(v);
        }
    }
    let centers: Vec<_> = cells.iter().map(|&k| template.cell_center(k)).collect();
    let proj = Projector::new(mesh, &centers);
    let keep: Vec<usize> = (0..cells.len()).filter(|&i| proj.inside[i]).collect();

    let layout = model.layout();
    let variant = model.spec().variant;
    let m = cells.len();
    let mut count = 0.0;
    let mut mean = vec![0.0; m];
    let mut m2 = vec![0.0; m];
    inference::for_each_sample(fit, n_samples, seed, |theta, lat| {
        let beta = &lat[layout.beta()];
        let lz2 = lat[layout.log_zeta().start];
        let psi2 = if variant.has_psi() { theta[5] } else { 1.0 };
        let w1 = sparse::mat_vec(&proj.matrix, &lat[layout.w1()]);
        let w2 = layout.w2().map(|r| sparse::mat_vec(&proj.matrix, &lat[r]));
        count += 1.0;
        for &i in &keep {
            let fixed = beta[0] + x[i].iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let l1 = (fixed + w1[i]).exp();
            let l2 = (fixed + lz2 + psi2 * w1[i] + w2.as_ref().map_or(0.0, |w| w[i])).exp();
            let t = l1 + l2;
            // Welford update
            let d = t - mean[i];
            mean[i] += d / count;
            m2[i] += d * (t - mean[i]);
        }
        Ok(())
    })?;

    let nodata = -9999.0;
    let mut mean_grid = vec![nodata; template.len()];
    let mut sd_grid = vec![nodata; template.len()];
    for &i in &keep {
        let k = cells[i];
        if !mean[i].is_finite() || !m2[i].is_finite() {
            return Err(Error::Numerical(format!("non-finite predictive moment at cell {k}")));
        }
        mean_grid[k] = mean[i];
        sd_grid[k] = (mean[i] + m2[i] / count).sqrt();
    }
    let geometry = CovariateRaster { nodata, ..template };
    Ok(PredictionRaster {
        mean: geometry.with_values("mean", mean_grid),
        sd: geometry.with_values("sd", sd_grid),
        meta: PredictionMeta {
            model: variant,
            n_samples,
            seed,
            covariates: names.clone(),
            predicted_cells: keep.len(),
        },
    })
}

impl PredictionRaster {
    /// Write `mean.asc`, `sd.asc` and `prediction.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.mean.write(&dir.join("mean.asc"))?;
        self.sd.write(&dir.join("sd.asc"))?;
        let path = dir.join("prediction.json");
        let text = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests;

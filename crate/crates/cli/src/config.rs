//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use multisurvey::assessment::AssessConfig;
use multisurvey::inference::FitConfig;
use multisurvey::model::{ModelVariant, PriorSpec};
use multisurvey::sim::ScenarioSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stochastic step derives from it.
    pub seed: Option<u64>,
    pub data: DataBlock,
    pub mesh: MeshBlock,
    pub model: ModelBlock,
    pub priors: PriorSpec,
    pub inference: FitConfig,
    pub assess: AssessBlock,
    pub predict: PredictBlock,
    pub screen: ScreenBlock,
    pub simulate: SimulateBlock,
    pub scenario: ScenarioSpec,
    pub study: StudyBlock,
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataBlock {
    pub dataset: Option<PathBuf>,
    /// Covariate rasters; each raster is named after its file stem.
    pub grids: Vec<PathBuf>,
    /// Mesh in text form; built from `[mesh]` when absent.
    pub mesh: Option<PathBuf>,
    /// Fit state read by `assess` and `predict`; `<out>/fit_state.json` when absent.
    pub fit_state: Option<PathBuf>,
}

/// Mesh construction around the sites. Unset lengths scale with the larger
/// side of the site bounding box `L`: inner edge `L/10`, outer edge `L/5`,
/// buffer `L/4`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshBlock {
    pub max_edge_inner: Option<f64>,
    pub max_edge_outer: Option<f64>,
    pub buffer: Option<f64>,
    /// `[x0, y0, x1, y1]`; the site bounding box when absent.
    pub domain: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub variant: ModelVariant,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self { variant: ModelVariant::M1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssessBlock {
    pub n_samples: usize,
    pub cv_threshold: f64,
    pub predictive_source: u8,
}

impl Default for AssessBlock {
    fn default() -> Self {
        let d = AssessConfig::default();
        Self {
            n_samples: d.n_samples,
            cv_threshold: d.cv_threshold,
            predictive_source: d.predictive_source,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictBlock {
    pub n_samples: usize,
}

impl Default for PredictBlock {
    fn default() -> Self {
        Self { n_samples: 1000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreenBlock {
    pub threshold: f64,
    /// Covariates kept first when two are correlated.
    pub priority: Vec<String>,
    pub max_cells: usize,
}

impl Default for ScreenBlock {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            priority: Vec::new(),
            max_cells: 100_000,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateBlock {
    pub replicate: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyBlock {
    pub scenarios: Vec<u8>,
    pub models: Vec<ModelVariant>,
    pub n_samples: usize,
}

impl Default for StudyBlock {
    fn default() -> Self {
        Self {
            scenarios: vec![1, 2],
            models: ModelVariant::ALL.to_vec(),
            n_samples: 10_000,
        }
    }
}

impl RunConfig {
    /// Parse TOML, reporting the offending field path on failure.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Input(format!("{origin}: field `{}`: {}", e.path(), e.inner())))
    }

    /// Paths are left as written; see [`RunConfig::resolve_paths`].
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        d.dataset.iter_mut().for_each(fix);
        d.mesh.iter_mut().for_each(fix);
        d.fit_state.iter_mut().for_each(fix);
        d.grids.iter_mut().for_each(fix);
    }

    /// Reduced sample counts and replicates for quick runs.
    pub fn make_fast(&mut self) {
        self.inference.n_samples = self.inference.n_samples.min(500);
        self.assess.n_samples = self.assess.n_samples.min(500);
        self.predict.n_samples = self.predict.n_samples.min(200);
        self.study.n_samples = self.study.n_samples.min(500);
        self.scenario.replicates = self.scenario.replicates.min(20);
    }
}

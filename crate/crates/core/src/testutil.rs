//! Shared fixtures for unit tests.

use crate::mesh::{build_mesh, DomainSpec, Point2, TriMesh};
use crate::model::{Country, ModelSpec, ModelVariant, Observation, Site, Source, SurveyDataset};
use crate::inference::{DesignPoint, LatentGaussianModel, PosteriorFit};
use crate::sparse::EnvelopeCholesky;
use crate::spde::PcPriorSpec;

/// Small square mesh, 10 x 10 units.
pub fn square_mesh(h: f64) -> TriMesh {
    build_mesh(&DomainSpec::rectangle(0.0, 0.0, 10.0, 10.0, h, 2.0 * h, 0.0)).unwrap()
}

/// Five sites (three in A, two in B) with every source observed.
pub fn five_site_dataset() -> SurveyDataset {
    let sites = vec![
        site("a1", 1.5, 2.0, Country::A),
        site("a2", 3.0, 7.5, Country::A),
        site("a3", 4.2, 4.4, Country::A),
        site("b1", 7.5, 3.3, Country::B),
        site("b2", 8.8, 8.1, Country::B),
    ];
    let obs = [
        (0, 1, 12.0),
        (1, 1, 30.0),
        (2, 1, 7.0),
        (0, 2, 1.0),
        (2, 2, 0.0),
        (3, 3, 9.0),
        (4, 3, 15.0),
        (3, 4, 22.0),
        (4, 4, 41.5),
    ];
    SurveyDataset {
        sites,
        observations: obs
            .iter()
            .map(|&(s, j, y)| Observation {
                site: s,
                source: Source::new(j).unwrap(),
                y,
            })
            .collect(),
        covariate_names: vec!["prec".into()],
        covariates: vec![vec![-1.2], vec![0.3], vec![0.5], vec![1.1], vec![-0.7]],
        source_labels: SurveyDataset::default_labels(),
    }
}

fn site(id: &str, x: f64, y: f64, country: Country) -> Site {
    Site {
        id: id.into(),
        location: Point2::new(x, y),
        country,
    }
}

/// Model spec for the five-site fixture with priors scaled to the 10-unit square.
pub fn five_site_spec(variant: ModelVariant) -> ModelSpec {
    let mut spec = ModelSpec::new(variant, vec!["prec".into()]);
    spec.priors.field1 = PcPriorSpec {
        rho0: 3.0,
        alpha_rho: 0.1,
        sigma0: 1.0,
        alpha_sigma: 0.1,
    };
    spec.priors.field2 = Some(PcPriorSpec {
        rho0: 1.0,
        alpha_rho: 0.1,
        sigma0: 3.0,
        alpha_sigma: 0.1,
    });
    spec
}

/// A fit whose single design point sits at `(theta, x)` with a factor of
/// enormous precision, so every posterior draw equals `x` to rounding.
pub fn point_mass_fit<M: LatentGaussianModel>(model: &M, theta: Vec<f64>, x: Vec<f64>) -> PosteriorFit {
    let q = crate::sparse::diagonal(&vec![1e300; x.len()]);
    let factor = EnvelopeCholesky::factorize(model.symbolic(), &q).unwrap();
    PosteriorFit {
        hyper_mode: theta.clone(),
        log_posterior_at_mode: 0.0,
        hyper_hessian: vec![],
        design: vec![DesignPoint {
            theta,
            log_posterior: 0.0,
            weight: 1.0,
            mode: x,
            factor: Some(factor),
        }],
        summaries: vec![],
        evaluations: 0,
        converged: true,
    }
}

//! Library-level run: simulate a replicate, persist it, fit, assess, predict.

use multisurvey::assessment::{assess, AssessConfig};
use multisurvey::inference::FitConfig;
use multisurvey::io::{read_dataset, write_dataset};
use multisurvey::model::ModelVariant;
use multisurvey::predict::predict_grid;
use multisurvey::sim::{fit_variant, replicate_dataset, study_priors, ScenarioSpec, SimWorld};

fn small_world() -> SimWorld {
    SimWorld::new(&ScenarioSpec {
        n_sites_a: 30,
        n_sites_b: 20,
        max_edge_inner: 15_000.0,
        max_edge_outer: 30_000.0,
        buffer: 20_000.0,
        ..ScenarioSpec::default()
    })
    .unwrap()
}

#[test]
fn simulate_fit_assess_predict() {
    let world = small_world();
    let (truth, data) = replicate_dataset(&world, 0).unwrap();
    assert_eq!(truth.log_lambda.len(), world.sites.len());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.csv");
    write_dataset(&path, &data).unwrap();
    let data = read_dataset(&path).unwrap();
    assert_eq!(data.sites.len(), 50);

    let cfg = FitConfig {
        n_samples: 300,
        ..FitConfig::default()
    };
    let (m1, fit1) = fit_variant(ModelVariant::M1, &data, &world.mesh, &study_priors(), &cfg, None).unwrap();
    let (m2, fit2) = fit_variant(ModelVariant::M2, &data, &world.mesh, &study_priors(), &cfg, Some(&fit1.hyper_mode)).unwrap();
    assert!(fit2.summary("psi2").is_some() && fit1.summary("psi2").is_none());

    let acfg = AssessConfig {
        n_samples: 500,
        ..AssessConfig::default()
    };
    for (model, fit) in [(&m1, &fit1), (&m2, &fit2)] {
        let r = assess(model, fit, &acfg).unwrap();
        for v in [r.dic, r.waic, r.lpml, r.mean_crps, r.rmse] {
            assert!(v.is_finite(), "{r:?}");
        }
        assert!(r.p_waic > 0.0);
        assert_eq!(r.cpo.len(), r.predictive_obs.len());
    }

    let pred = predict_grid(&m1, &fit1, std::slice::from_ref(&world.prec), &world.standardization, &world.mesh, 100, 3).unwrap();
    let mean: Vec<f64> = pred.mean.valid_values().collect();
    let sd: Vec<f64> = pred.sd.valid_values().collect();
    assert_eq!(mean.len(), sd.len());
    assert!(!mean.is_empty());
    // sd includes the Poisson term, so it is at least sqrt(mean)
    assert!(mean.iter().zip(&sd).all(|(m, s)| *m > 0.0 && *s >= m.sqrt() * (1.0 - 1e-12)));
}

#[test]
fn fits_are_reproducible_for_a_seed() {
    let world = small_world();
    let (_, data) = replicate_dataset(&world, 1).unwrap();
    let cfg = FitConfig {
        n_samples: 100,
        ..FitConfig::default()
    };
    let a = fit_variant(ModelVariant::M1, &data, &world.mesh, &study_priors(), &cfg, None).unwrap().1;
    let b = fit_variant(ModelVariant::M1, &data, &world.mesh, &study_priors(), &cfg, None).unwrap().1;
    assert_eq!(a.hyper_mode, b.hyper_mode);
    assert_eq!(a.summaries, b.summaries);
}

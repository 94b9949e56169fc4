use super::*;
use crate::inference::{fit, FitConfig};
use crate::model::ModelVariant;
use crate::testutil::{five_site_dataset, five_site_spec, point_mass_fit, square_mesh};

/// 12 x 12 unit cells over [-1, 11]²: the outer ring lies outside the mesh.
fn grid() -> CovariateRaster {
    let mut r = CovariateRaster::new("prec", -1.0, -1.0, 1.0, 12, 12, -9999.0).unwrap();
    for k in 0..r.len() {
        let c = r.cell_center(k);
        r.values[k] = 0.3 * c.x - 0.2 * c.y;
    }
    r.values[5 * 12 + 5] = -9999.0;
    r
}

fn identity_standardization() -> Standardization {
    Standardization {
        names: vec!["prec".into()],
        means: vec![0.0],
        sds: vec![1.0],
    }
}

fn model(variant: ModelVariant) -> (SurveyModel, TriMesh) {
    let mesh = square_mesh(2.5);
    (SurveyModel::new(five_site_spec(variant), five_site_dataset(), &mesh).unwrap(), mesh)
}

fn degenerate_state(m: &SurveyModel, psi2: Option<f64>) -> (Vec<f64>, Vec<f64>) {
    let layout = m.layout();
    let mut x = vec![0.0; layout.dim()];
    x[0] = 10f64.ln();
    x[layout.log_zeta().start] = 0.05f64.ln();
    x[layout.log_zeta().start + 1] = 0.3;
    let mut theta = vec![3f64.ln(), 0.0, 0.0, 0.0, 0.0];
    if let Some(p) = psi2 {
        theta.extend_from_slice(&[p, 1.3, 0.7]);
    }
    (theta, x)
}

#[test]
fn degenerate_fit_gives_poisson_total() {
    let (m, mesh) = model(ModelVariant::M1);
    let (theta, x) = degenerate_state(&m, None);
    let f = point_mass_fit(&m, theta, x);
    let p = predict_grid(&m, &f, &[grid()], &identity_standardization(), &mesh, 1, 0).unwrap();
    let expected = 10f64.ln().exp() + (10f64.ln() + 0.05f64.ln()).exp();
    assert!((expected - 10.5).abs() < 1e-12);
    let mut inside = 0;
    for k in 0..p.mean.len() {
        let c = p.mean.cell_center(k);
        let outside = c.x < 0.0 || c.y < 0.0 || c.x > 10.0 || c.y > 10.0 || k == 5 * 12 + 5;
        if outside {
            assert_eq!(p.mean.values[k], -9999.0);
            assert_eq!(p.sd.values[k], -9999.0);
        } else {
            inside += 1;
            assert!((p.mean.values[k] - expected).abs() < 1e-12);
            assert_eq!(p.sd.values[k], p.mean.values[k].sqrt());
        }
    }
    assert_eq!(inside, 99);
    assert_eq!(p.meta.predicted_cells, 99);
}

#[test]
fn unit_psi_reproduces_model_one() {
    let (m1, mesh) = model(ModelVariant::M1);
    let (m2, _) = model(ModelVariant::M2);
    let (t1, x1) = degenerate_state(&m1, None);
    let (t2, x2) = degenerate_state(&m2, Some(1.0));
    let layout = m1.layout();
    let mut x1 = x1;
    let mut x2 = x2;
    for (i, v) in layout.w1().enumerate() {
        x1[v] = 0.1 * (i as f64).sin();
        x2[v] = x1[v];
    }
    let g = [grid()];
    let s = identity_standardization();
    let a = predict_grid(&m1, &point_mass_fit(&m1, t1, x1), &g, &s, &mesh, 3, 1).unwrap();
    let b = predict_grid(&m2, &point_mass_fit(&m2, t2, x2), &g, &s, &mesh, 3, 1).unwrap();
    assert_eq!(a.mean, b.mean);
    assert_eq!(a.sd, b.sd);
}

#[test]
fn real_fit_invariants() {
    let (m, mesh) = model(ModelVariant::M2);
    let f = fit(&m, &FitConfig::default()).unwrap();
    let g = grid();
    let s = identity_standardization();
    let p = predict_grid(&m, &f, std::slice::from_ref(&g), &s, &mesh, 400, 3).unwrap();
    for (mu, sd) in p.mean.valid_values().zip(p.sd.valid_values()) {
        assert!(mu >= 0.0 && sd >= mu.sqrt() && sd * sd >= mu);
    }

    // per-cell values do not depend on which other cells are enumerated
    let mut crop = CovariateRaster::new("prec", 2.0, 1.0, 1.0, 6, 7, -9999.0).unwrap();
    for k in 0..crop.len() {
        crop.values[k] = g.value_at(crop.cell_center(k)).unwrap_or(-9999.0);
    }
    let q = predict_grid(&m, &f, &[crop.clone()], &s, &mesh, 400, 3).unwrap();
    for k in 0..crop.len() {
        let j = g.cell_of(crop.cell_center(k)).unwrap();
        assert_eq!(q.mean.values[k], p.mean.values[j]);
        assert_eq!(q.sd.values[k], p.sd.values[j]);
    }

    // doubling the draws moves the mean by little
    let p = predict_grid(&m, &f, std::slice::from_ref(&g), &s, &mesh, 2000, 3).unwrap();
    let big = predict_grid(&m, &f, &[g], &s, &mesh, 4000, 3).unwrap();
    let mut within = 0;
    let mut total = 0;
    for k in 0..p.mean.len() {
        if p.mean.values[k] == -9999.0 {
            continue;
        }
        total += 1;
        let var_t = big.sd.values[k].powi(2) - big.mean.values[k];
        let tol = 3.0 * var_t.max(0.0).sqrt() / 2000f64.sqrt();
        if (big.mean.values[k] - p.mean.values[k]).abs() <= tol + 1e-12 {
            within += 1;
        }
    }
    assert!(within as f64 >= 0.99 * total as f64, "{within}/{total}");
}

#[test]
fn mismatched_covariates_are_refused() {
    let (m, mesh) = model(ModelVariant::M1);
    let (theta, x) = degenerate_state(&m, None);
    let f = point_mass_fit(&m, theta, x);
    let mut g = grid();
    g.name = "elevation".into();
    let err = predict_grid(&m, &f, &[g], &identity_standardization(), &mesh, 1, 0).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)));
    assert!(predict_grid(&m, &f, &[], &identity_standardization(), &mesh, 1, 0).is_err());
}

#[test]
fn rasters_round_trip_through_files() {
    let (m, mesh) = model(ModelVariant::M1);
    let (theta, x) = degenerate_state(&m, None);
    let f = point_mass_fit(&m, theta, x);
    let p = predict_grid(&m, &f, &[grid()], &identity_standardization(), &mesh, 2, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    p.write(dir.path()).unwrap();
    let mean = CovariateRaster::read(&dir.path().join("mean.asc"), "mean").unwrap();
    assert_eq!(mean, p.mean);
    let meta: PredictionMeta = serde_json::from_str(&std::fs::read_to_string(dir.path().join("prediction.json")).unwrap()).unwrap();
    assert_eq!(meta, p.meta);
}

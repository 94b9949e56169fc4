//! Derivative-free minimisation.

/// Outcome of [`nelder_mead`].
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SimplexConfig {
    /// Spread of objective values across the simplex.
    pub ftol: f64,
    /// Largest vertex distance from the best vertex (max norm).
    pub xtol: f64,
    pub max_evaluations: usize,
    /// Number of restarts from the best point after convergence.
    pub restarts: usize,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self {
            ftol: 1e-3,
            xtol: 1e-2,
            max_evaluations: 3000,
            restarts: 1,
        }
    }
}

/// Minimise `f` with the Nelder-Mead simplex. Non-finite values are treated
/// as `+inf`, so infeasible points are simply rejected.
pub fn nelder_mead(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], steps: &[f64], cfg: &SimplexConfig) -> SimplexResult {
    let d = x0.len();
    let evals = std::cell::Cell::new(0usize);
    let mut eval = |x: &[f64]| {
        evals.set(evals.get() + 1);
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let start = eval(x0);
    if d == 0 {
        return SimplexResult {
            x: Vec::new(),
            value: start,
            evaluations: evals.get(),
            converged: true,
        };
    }

    let mut best = (x0.to_vec(), start);
    let mut converged = false;
    for round in 0..=cfg.restarts {
        let scale = if round == 0 { 1.0 } else { 0.5 };
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![best.clone()];
        for i in 0..d {
            let mut x = best.0.clone();
            x[i] += scale * steps[i];
            let mut v = eval(&x);
            if !v.is_finite() {
                x[i] = best.0[i] - scale * steps[i];
                v = eval(&x);
            }
            simplex.push((x, v));
        }
        let before = best.1;
        converged = run_simplex(&mut simplex, &mut eval, cfg, &|| evals.get());
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        best = simplex.swap_remove(0);
        if !converged || (round > 0 && before - best.1 < cfg.ftol) {
            break;
        }
    }
    SimplexResult {
        x: best.0,
        value: best.1,
        evaluations: evals.get(),
        converged,
    }
}

fn run_simplex(
    s: &mut [(Vec<f64>, f64)],
    f: &mut dyn FnMut(&[f64]) -> f64,
    cfg: &SimplexConfig,
    evals: &dyn Fn() -> usize,
) -> bool {
    let d = s.len() - 1;
    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(a, b)| a + t * (b - a)).collect() };
    loop {
        s.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = s[d].1 - s[0].1;
        let size = s[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&s[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if s[0].1.is_finite() && spread < cfg.ftol && size < cfg.xtol {
            return true;
        }
        if evals() >= cfg.max_evaluations {
            return false;
        }
        let mut centroid = vec![0.0; d];
        for (x, _) in &s[..d] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / d as f64;
            }
        }
        let worst = s[d].0.clone();
        let xr = combine(&centroid, &worst, -1.0);
        let fr = f(&xr);
        if fr < s[0].1 {
            let xe = combine(&centroid, &worst, -2.0);
            let fe = f(&xe);
            s[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < s[d - 1].1 {
            s[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < s[d].1 {
                let xc = combine(&centroid, &worst, -0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = combine(&centroid, &worst, 0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < s[d].1.min(fr) {
                s[d] = (xc, fc);
            } else {
                let x0 = s[0].0.clone();
                for v in s[1..].iter_mut() {
                    v.0 = combine(&x0, &v.0, 0.5);
                    v.1 = f(&v.0);
                }
            }
        }
    }
}

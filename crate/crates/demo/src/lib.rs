//! Browser bindings for three interactive views: risk curves of the
//! Gaussian model, a Monte Carlo check of one curve point, and an ROC
//! curve for two Gaussian score distributions.
//!
//! Every export returns a flat `Vec<f64>` (a `Float64Array` on the JS side)
//! and a string error, so the same functions run in native tests.

use aop_lab::metrics::{self, LabeledScores};
use aop_lab::rng;
use aop_lab::theory::{self, TheoryParams};
use wasm_bindgen::prelude::*;

fn params(d: usize, eta: f64, delta: f64, lambda: f64) -> TheoryParams {
    TheoryParams {
        d,
        eta,
        sigma: 1.0,
        delta,
        lambda,
    }
}

fn err(e: aop_lab::Error) -> String {
    e.to_string()
}

/// `points` values of `d` evenly spaced on `[0, d_max]`, as
/// `[d, r_id, r_ood, …]` for the LASSO classifier at `λ`.
#[wasm_bindgen]
pub fn risk_vs_d(d_max: u32, points: u32, eta: f64, delta: f64, lambda: f64) -> Result<Vec<f64>, String> {
    if points < 2 {
        return Err("need at least 2 points".into());
    }
    let mut out = Vec::with_capacity(3 * points as usize);
    for i in 0..points {
        let d = (d_max as u64 * i as u64 / (points as u64 - 1)) as usize;
        let p = params(d, eta, delta, lambda);
        let f = theory::lasso_classifier(&p);
        // λ ≥ 1 zeroes both weights and surfaces as an error here
        let r = theory::closed_form_risks(&f, &p).map_err(err)?;
        out.extend([d as f64, r.r_id, r.r_ood]);
    }
    Ok(out)
}

/// `[λ, r_id, r_ood, …]` for `points` values of `λ` on `[0, lambda_max]`.
#[wasm_bindgen]
pub fn risk_vs_lambda(d: u32, points: u32, eta: f64, delta: f64, lambda_max: f64) -> Result<Vec<f64>, String> {
    if points < 2 {
        return Err("need at least 2 points".into());
    }
    if !(0.0..1.0).contains(&lambda_max) {
        return Err(format!("lambda_max must lie in [0, 1), got {lambda_max}"));
    }
    let lambdas: Vec<f64> = (0..points).map(|i| lambda_max * i as f64 / (points - 1) as f64).collect();
    let rows = theory::sweep_lambda(&params(d as usize, eta, delta, 0.0), &lambdas).map_err(err)?;
    Ok(rows.iter().flat_map(|r| [r.lambda, r.r_id, r.r_ood]).collect())
}

/// `[cf_id, cf_ood, mc_id, mc_ood, se_id, se_ood]`: closed form next to an
/// `n`-sample estimate for the LASSO classifier.
#[wasm_bindgen]
pub fn monte_carlo_check(d: u32, eta: f64, delta: f64, lambda: f64, n: u32, seed: u64) -> Result<Vec<f64>, String> {
    let p = params(d as usize, eta, delta, lambda);
    let f = theory::lasso_classifier(&p);
    let cf = theory::closed_form_risks(&f, &p).map_err(err)?;
    let mc = theory::monte_carlo_risks(&f, &p, n as usize, seed).map_err(err)?;
    Ok(vec![
        cf.r_id,
        cf.r_ood,
        mc.risks.r_id,
        mc.risks.r_ood,
        mc.se_id,
        mc.se_ood,
    ])
}

/// ID scores `N(separation, 1)`, OOD scores `N(0, 1)`, `n` of each.
/// Returns `[auroc, aupr, fpr95, fpr₀, tpr₀, fpr₁, tpr₁, …]`.
#[wasm_bindgen]
pub fn roc_demo(separation: f64, n: u32, seed: u64) -> Result<Vec<f64>, String> {
    if n == 0 || !separation.is_finite() {
        return Err("need n >= 1 and a finite separation".into());
    }
    let mut r = rng::rng_from(seed, &[1]);
    let id: Vec<f64> = (0..n).map(|_| separation + rng::normal(&mut r)).collect();
    let ood: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
    let s = LabeledScores::new(id, ood);
    let summary = metrics::detection_summary(&s).map_err(err)?;
    let roc = metrics::roc_curve(&s).map_err(err)?;
    let mut out = vec![summary.auroc, summary.aupr, summary.fpr95];
    out.extend(roc.fpr.iter().zip(&roc.tpr).flat_map(|(f, t)| [*f, *t]));
    Ok(out)
}

//! Risks of linear classifiers in the two-class Gaussian model with one
//! special feature and `d` common features.
//!
//! A classifier `f(x) = w1·x₁ + wc·Σ_{i≥2} x_i` has Gaussian logits. With
//! `m = w1 + wc·d·η`, `m₀ = wc·d·η` and `v = σ²(w1² + d·wc²)`:
//!
//! * ID risk `Pr{sign f(x) ≠ y} = Φ̄(m/√v)`
//! * OOD risk `Pr{|f(x)| > δ} = Φ̄((δ−m₀)/√v) + Φ̄((δ+m₀)/√v)`
//!
//! where `Φ̄` is the standard normal upper tail. The Bayes classifier is
//! `(w1, wc) = (1, η)`; the LASSO solution is `((1−λ)₊, (η−λ)₊)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{self, GaussianModelParams};
use crate::error::{Error, Result};
use crate::rng;

/// `Φ̄(x) = ½·erfc(x/√2)`. `erfc` keeps full relative precision deep into
/// the upper tail, where `1 − Φ(x)` would cancel.
pub fn normal_upper_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    pub d: usize,
    pub eta: f64,
    pub sigma: f64,
    pub delta: f64,
    pub lambda: f64,
}

impl TheoryParams {
    /// `σ = 1`, `η = 0.01`, `δ = 1`, `λ = 0`.
    pub fn reference(d: usize) -> Self {
        Self {
            d,
            eta: 0.01,
            sigma: 1.0,
            delta: 1.0,
            lambda: 0.0,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            p.push(format!("sigma must be > 0, got {}", self.sigma));
        }
        if !self.eta.is_finite() {
            p.push("eta must be finite".into());
        }
        if !(self.delta >= 0.0) {
            p.push(format!("delta must be >= 0, got {}", self.delta));
        }
        if !(self.lambda >= 0.0) {
            p.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        p
    }

    fn check(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }
}

/// `f(x) = w1·x₁ + wc·Σ_{i=2}^{d+1} x_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearClassifier {
    pub w1: f64,
    pub wc: f64,
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskPair {
    pub r_id: f64,
    /// Sum of the two tails; both are tails of one Gaussian, so it stays ≤ 1.
    pub r_ood: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloRisks {
    pub risks: RiskPair,
    pub se_id: f64,
    pub se_ood: f64,
    pub n: usize,
}

pub fn bayes_classifier(p: &TheoryParams) -> LinearClassifier {
    LinearClassifier {
        w1: 1.0,
        wc: p.eta,
        d: p.d,
    }
}

pub fn lasso_classifier(p: &TheoryParams) -> LinearClassifier {
    LinearClassifier {
        w1: (1.0 - p.lambda).max(0.0),
        wc: (p.eta - p.lambda).max(0.0),
        d: p.d,
    }
}

fn logit_moments(f: &LinearClassifier, p: &TheoryParams) -> Result<(f64, f64, f64)> {
    p.check()?;
    if f.d != p.d {
        return Err(Error::InvalidArgument(format!(
            "classifier built for d={} evaluated at d={}",
            f.d, p.d
        )));
    }
    let d = p.d as f64;
    let m0 = f.wc * d * p.eta;
    let m = f.w1 + m0;
    let v = p.sigma * p.sigma * (f.w1 * f.w1 + d * f.wc * f.wc);
    if v == 0.0 {
        return Err(Error::DegenerateClassifier);
    }
    Ok((m, m0, v.sqrt()))
}

pub fn closed_form_risks(f: &LinearClassifier, p: &TheoryParams) -> Result<RiskPair> {
    let (m, m0, s) = logit_moments(f, p)?;
    Ok(RiskPair {
        r_id: normal_upper_tail(m / s),
        r_ood: normal_upper_tail((p.delta - m0) / s) + normal_upper_tail((p.delta + m0) / s),
    })
}

fn bernoulli_se(p_hat: f64, n: usize) -> f64 {
    (p_hat * (1.0 - p_hat) / n as f64).sqrt()
}

/// Empirical risks over `n` ID and `n` OOD draws.
///
/// Draws `x₁` and the common-feature sum `S = Σ x_i` directly: given the sign,
/// `S ~ N(±d·η, d·σ²)` exactly, so `f = w1·x₁ + wc·S` has the same law as
/// with full `d+1`-dimensional samples at `O(1)` cost per draw.
pub fn monte_carlo_risks(
    f: &LinearClassifier,
    p: &TheoryParams,
    n: usize,
    seed: u64,
) -> Result<MonteCarloRisks> {
    logit_moments(f, p)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let d = p.d as f64;
    let sd_sum = p.sigma * d.sqrt();
    let mut id_rng = rng::rng_from(seed, &[rng::TAG_DATA, 20]);
    let mut id_errors = 0usize;
    for _ in 0..n {
        let y = if rand::Rng::random::<bool>(&mut id_rng) { 1.0 } else { -1.0 };
        let x1 = y + p.sigma * rng::normal(&mut id_rng);
        let s = y * d * p.eta + sd_sum * rng::normal(&mut id_rng);
        let logit = f.w1 * x1 + f.wc * s;
        if y * logit <= 0.0 {
            id_errors += 1;
        }
    }
    let mut ood_rng = rng::rng_from(seed, &[rng::TAG_DATA, 21]);
    let mut rejected = 0usize;
    for _ in 0..n {
        let q = if rand::Rng::random::<bool>(&mut ood_rng) { 1.0 } else { -1.0 };
        let x1 = p.sigma * rng::normal(&mut ood_rng);
        let s = q * d * p.eta + sd_sum * rng::normal(&mut ood_rng);
        if (f.w1 * x1 + f.wc * s).abs() > p.delta {
            rejected += 1;
        }
    }
    Ok(summarize(id_errors, rejected, n))
}

fn summarize(id_errors: usize, rejected: usize, n: usize) -> MonteCarloRisks {
    let r_id = id_errors as f64 / n as f64;
    let r_ood = rejected as f64 / n as f64;
    MonteCarloRisks {
        risks: RiskPair { r_id, r_ood },
        se_id: bernoulli_se(r_id, n),
        se_ood: bernoulli_se(r_ood, n),
        n,
    }
}

/// Same estimate from full `(d+1)`-dimensional samples of the data
/// generators. Cost grows with `d`; meant as a cross-check at small `d`.
pub fn monte_carlo_risks_full(
    f: &LinearClassifier,
    p: &TheoryParams,
    n: usize,
    seed: u64,
) -> Result<MonteCarloRisks> {
    logit_moments(f, p)?;
    let gp = GaussianModelParams {
        d: p.d,
        eta: p.eta,
        sigma: p.sigma,
        seed,
    };
    let logit = |row: &[f64]| f.w1 * row[0] + f.wc * row[1..].iter().sum::<f64>();
    let id = datagen::sample_id(&gp, n)?;
    let labels = id.labels.as_deref().expect("ID samples are labeled");
    let id_errors = id
        .inputs
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            sign * logit(row) <= 0.0
        })
        .count();
    let ood = datagen::sample_ood(&gp, n)?;
    let rejected = ood
        .inputs
        .row_iter()
        .filter(|row| logit(row).abs() > p.delta)
        .count();
    Ok(summarize(id_errors, rejected, n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DSweepRow {
    pub d: usize,
    pub delta: f64,
    pub r_id: f64,
    pub r_ood: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSweepRow {
    pub lambda: f64,
    pub r_id: f64,
    pub r_ood: f64,
}

/// Bayes-classifier risks over `d × δ`, `d` varying fastest within each `δ`.
pub fn sweep_d(template: &TheoryParams, d_values: &[usize], delta_values: &[f64]) -> Result<Vec<DSweepRow>> {
    let mut rows = Vec::with_capacity(d_values.len() * delta_values.len());
    for &delta in delta_values {
        for &d in d_values {
            let p = TheoryParams { d, delta, ..*template };
            let r = closed_form_risks(&bayes_classifier(&p), &p)?;
            rows.push(DSweepRow {
                d,
                delta,
                r_id: r.r_id,
                r_ood: r.r_ood,
            });
        }
    }
    Ok(rows)
}

/// LASSO-classifier risks over `λ` at the template's `d` and `δ`.
pub fn sweep_lambda(template: &TheoryParams, lambda_values: &[f64]) -> Result<Vec<LambdaSweepRow>> {
    lambda_values
        .iter()
        .map(|&lambda| {
            let p = TheoryParams { lambda, ..*template };
            let r = closed_form_risks(&lasso_classifier(&p), &p)?;
            Ok(LambdaSweepRow {
                lambda,
                r_id: r.r_id,
                r_ood: r.r_ood,
            })
        })
        .collect()
}

/// `λ` minimizing `r_id + r_ood`; a reporting aid, not a claim.
pub fn balanced_lambda(rows: &[LambdaSweepRow]) -> Option<f64> {
    rows.iter()
        .min_by(|a, b| (a.r_id + a.r_ood).total_cmp(&(b.r_id + b.r_ood)))
        .map(|r| r.lambda)
}

pub const D_SWEEP_HEADER: &str = "d,delta,r_id,r_ood";
pub const LAMBDA_SWEEP_HEADER: &str = "lambda,r_id,r_ood";

pub fn d_sweep_csv(rows: &[DSweepRow]) -> String {
    let mut s = format!("{D_SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:?},{:?},{:?}\n", r.d, r.delta, r.r_id, r.r_ood));
    }
    s
}

pub fn lambda_sweep_csv(rows: &[LambdaSweepRow]) -> String {
    let mut s = format!("{LAMBDA_SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{:?},{:?},{:?}\n", r.lambda, r.r_id, r.r_ood));
    }
    s
}

fn csv_records(text: &str, header: &str) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let got = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            column: 1,
            message: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if got != header {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!("expected header '{header}', found '{got}'"),
        });
    }
    rdr.records()
        .map(|r| {
            r.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                column: 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line,
            column: i + 1,
            message: "not a number".into(),
        })
}

pub fn parse_d_sweep(text: &str) -> Result<Vec<DSweepRow>> {
    csv_records(text, D_SWEEP_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(DSweepRow {
                d: field(r, 0, i + 2)?,
                delta: field(r, 1, i + 2)?,
                r_id: field(r, 2, i + 2)?,
                r_ood: field(r, 3, i + 2)?,
            })
        })
        .collect()
}

pub fn parse_lambda_sweep(text: &str) -> Result<Vec<LambdaSweepRow>> {
    csv_records(text, LAMBDA_SWEEP_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(LambdaSweepRow {
                lambda: field(r, 0, i + 2)?,
                r_id: field(r, 1, i + 2)?,
                r_ood: field(r, 2, i + 2)?,
            })
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

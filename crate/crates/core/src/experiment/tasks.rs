//! Subcommand bodies that are not plain training runs: the theory sweeps,
//! landscape scans, and evaluation of a saved checkpoint.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::experiment::config::{ExperimentConfig, LandscapeConfig, TheoryConfig};
use crate::experiment::pipeline::{self, Datasets, RunOptions};
use crate::experiment::report::{self, MetricsRow};
use crate::landscape::{self, DirectionSpec, LandscapeRow};
use crate::metrics::LabeledScores;
use crate::netcore::{self, MlpSpec, ParamSet};
use crate::scoring::{self, ScorerConfig};
use crate::theory::{self, DSweepRow, LambdaSweepRow, TheoryParams};

pub const D_SWEEP_FILE: &str = "theory_d_sweep.csv";
pub const LAMBDA_SWEEP_FILE: &str = "theory_lambda_sweep.csv";
/// Scan of the pipeline's output model (the average when one exists).
pub const LANDSCAPE_FILE: &str = "landscape.csv";
/// Scan of the online weights, same layout.
pub const LANDSCAPE_ONLINE_FILE: &str = "landscape_online.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryTables {
    pub d_sweep: Vec<DSweepRow>,
    pub lambda_sweep: Vec<LambdaSweepRow>,
}

pub fn theory_tables(cfg: &TheoryConfig) -> Result<TheoryTables> {
    let template = TheoryParams {
        d: cfg.lambda_d,
        eta: cfg.eta,
        sigma: cfg.sigma,
        delta: cfg.lambda_delta,
        lambda: 0.0,
    };
    Ok(TheoryTables {
        d_sweep: theory::sweep_d(&template, &cfg.d_values, &cfg.delta_values)?,
        lambda_sweep: theory::sweep_lambda(&template, &cfg.lambda_values)?,
    })
}

/// Writes both sweep tables into `dir`.
pub fn emit_theory(cfg: &TheoryConfig, dir: &Path) -> Result<TheoryTables> {
    let t = theory_tables(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    theory::write_text(&dir.join(D_SWEEP_FILE), &theory::d_sweep_csv(&t.d_sweep))?;
    theory::write_text(&dir.join(LAMBDA_SWEEP_FILE), &theory::lambda_sweep_csv(&t.lambda_sweep))?;
    Ok(t)
}

pub type Scan = (u64, Vec<LandscapeRow>);

/// Scans `cfg.directions` random directions (seeds `0..directions`) over
/// `cfg.scale`'s default α grid, using test data as ID.
pub fn scan_directions(
    spec: &MlpSpec,
    params: &ParamSet,
    cfg: &LandscapeConfig,
    scorer_cfg: &ScorerConfig,
    data: &Datasets,
) -> Result<Vec<Scan>> {
    let alphas = landscape::default_alphas(cfg.scale);
    (0..cfg.directions as u64)
        .map(|seed| {
            let dir = landscape::make_direction(
                params,
                &DirectionSpec {
                    seed,
                    normalization: cfg.normalization,
                    alphas: alphas.clone(),
                },
            );
            let rows = landscape::landscape_scan(
                spec,
                params,
                &dir,
                &alphas,
                &data.test,
                &data.ood,
                cfg.scorer,
                scorer_cfg,
            )?;
            Ok((seed, rows))
        })
        .collect()
}

/// Median over directions of the AUROC range on `[lo, hi]`; directions with
/// no usable rows are skipped.
pub fn median_auroc_range(scans: &[Scan], lo: f64, hi: f64) -> Option<f64> {
    let mut r: Vec<f64> = scans
        .iter()
        .filter_map(|(_, rows)| landscape::auroc_range(rows, lo, hi))
        .collect();
    if r.is_empty() {
        return None;
    }
    r.sort_by(f64::total_cmp);
    let n = r.len();
    Some(if n % 2 == 1 {
        r[n / 2]
    } else {
        0.5 * (r[n / 2 - 1] + r[n / 2])
    })
}

#[derive(Debug, Clone)]
pub struct LandscapeScans {
    pub online: Vec<Scan>,
    pub averaged: Option<Vec<Scan>>,
}

/// Scans a pair of weights (online, optional average).
pub fn landscape_pair(
    cfg: &ExperimentConfig,
    spec: &MlpSpec,
    online: &ParamSet,
    averaged: Option<&ParamSet>,
    data: &Datasets,
) -> Result<LandscapeScans> {
    let scan = |p| scan_directions(spec, p, &cfg.landscape, &cfg.scorer_config, data);
    Ok(LandscapeScans {
        online: scan(online)?,
        averaged: averaged.map(scan).transpose()?,
    })
}

/// The `landscape` subcommand: scans the configured checkpoint, or trains
/// per the config and scans the last round. Writes [`LANDSCAPE_FILE`] and,
/// when there is an average, [`LANDSCAPE_ONLINE_FILE`].
pub fn run_landscape(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<LandscapeScans> {
    let data = pipeline::build_datasets(cfg)?;
    let scans = match &cfg.landscape.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            landscape_pair(cfg, &ck.spec, &ck.params, ck.ema.as_ref(), &data)?
        }
        None => {
            let out = pipeline::run_aop(cfg, &RunOptions::default())?;
            let last = out.rounds.last().ok_or_else(|| Error::Empty("run produced no rounds".into()))?;
            landscape_pair(cfg, &out.spec, &last.online, last.averaged.as_ref(), &data)?
        }
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        match &scans.averaged {
            Some(avg) => {
                theory::write_text(&dir.join(LANDSCAPE_FILE), &landscape::landscape_csv(avg))?;
                theory::write_text(&dir.join(LANDSCAPE_ONLINE_FILE), &landscape::landscape_csv(&scans.online))?;
            }
            None => theory::write_text(&dir.join(LANDSCAPE_FILE), &landscape::landscape_csv(&scans.online))?,
        }
    }
    Ok(scans)
}

#[derive(Debug, Clone)]
pub struct CheckpointEval {
    pub metrics: Vec<MetricsRow>,
    /// Per-scorer ID/OOD scores, in `cfg.scorers` order.
    pub scores: Vec<LabeledScores>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Scores the checkpoint's output model (its averaged weights when stored)
/// with every configured scorer.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<CheckpointEval> {
    let data = pipeline::build_datasets(cfg)?;
    let params = ck.ema.as_ref().unwrap_or(&ck.params);
    let spec = &ck.spec;
    let labels = data
        .test
        .labels
        .clone()
        .ok_or_else(|| Error::InvalidArgument("test data must be labeled".into()))?;
    let trace = netcore::forward(spec, params, &data.test.inputs)?;
    let predictions = netcore::argmax_rows(trace.logits());
    let correct: Vec<bool> = predictions.iter().zip(&labels).map(|(p, y)| p == y).collect();
    let bank = if cfg.scorers.iter().any(|s| s.needs_bank()) {
        Some(scoring::fit_feature_bank(spec, params, &data.train, &cfg.scorer_config)?)
    } else {
        None
    };
    let mut metrics = Vec::new();
    let mut scores = Vec::new();
    for &s in &cfg.scorers {
        let id = scoring::score_batch(s, spec, params, bank.as_ref(), &data.test.inputs, &cfg.scorer_config)?;
        let ood = scoring::score_batch(s, spec, params, bank.as_ref(), &data.ood.inputs, &cfg.scorer_config)?;
        let ls = LabeledScores::new(id, ood);
        metrics.push(report::metrics_from_scores(s.name(), &ls, &correct)?);
        scores.push(ls);
    }
    Ok(CheckpointEval {
        metrics,
        scores,
        predictions,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd_counts() {
        let row = |alpha, auroc| LandscapeRow {
            alpha,
            auroc,
            fpr95: 0.0,
            acc: 1.0,
            flagged: false,
        };
        let scan = |lo, hi| vec![row(-1.0, lo), row(0.0, hi), row(1.0, lo)];
        let s = vec![(0, scan(0.5, 0.6)), (1, scan(0.5, 0.9)), (2, scan(0.5, 0.7))];
        assert!((median_auroc_range(&s, -1.0, 1.0).unwrap() - 0.2).abs() < 1e-12);
        assert!((median_auroc_range(&s[..2], -1.0, 1.0).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(median_auroc_range(&s, 2.0, 3.0), None);
    }

    #[test]
    fn theory_tables_follow_config_grid() {
        let cfg = TheoryConfig {
            d_values: vec![0, 10],
            delta_values: vec![1.0, 2.0],
            lambda_values: vec![0.0, 0.5],
            ..TheoryConfig::default()
        };
        let t = theory_tables(&cfg).unwrap();
        assert_eq!(t.d_sweep.len(), 4);
        assert_eq!(t.lambda_sweep.len(), 2);
    }
}

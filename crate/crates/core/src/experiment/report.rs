//! Report tables, per-sample score files, and plots.

use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::runlog::{ModelKind, RunLog};
use crate::experiment::svg::{LinePlot, Series};
use crate::metrics::{self, ConfidenceOutcomes, LabeledScores};
use crate::scoring::Scorer;

pub const METRICS_HEADER: &str = "scorer,auroc,aupr,fpr95,aurc_e3,e_aurc_e3,aupr_err,acc";
pub const CURVES_HEADER: &str = "round,epoch,sparsity,model,scorer,ood_set,auroc,fpr95,test_err";
pub const SCORES_HEADER: &str = "sample_id,provenance,score";
pub const PREDICTIONS_HEADER: &str = "sample_id,label,prediction";

/// One line of `metrics.csv`. AURC and E-AURC are stored as fractions and
/// written multiplied by 10³.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scorer: String,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub aurc: f64,
    pub e_aurc: f64,
    pub aupr_err: f64,
    pub acc: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.scorer,
            r.auroc,
            r.aupr,
            r.fpr95,
            r.aurc * 1e3,
            r.e_aurc * 1e3,
            r.aupr_err,
            r.acc
        ));
    }
    s
}

/// Final-epoch metrics of the last round, preferring the averaged model.
pub fn metrics_from_runlog(log: &RunLog) -> Vec<MetricsRow> {
    let Some(round) = log.last_round() else {
        return Vec::new();
    };
    let finals = log.final_rows(round);
    let model = if finals.iter().any(|r| r.model == ModelKind::Averaged) {
        ModelKind::Averaged
    } else {
        ModelKind::Online
    };
    finals
        .into_iter()
        .filter(|r| r.model == model)
        .map(|r| MetricsRow {
            scorer: r.scorer.to_string(),
            auroc: r.auroc,
            aupr: r.aupr,
            fpr95: r.fpr95,
            aurc: r.aurc,
            e_aurc: r.e_aurc,
            aupr_err: r.aupr_err,
            acc: 1.0 - r.test_err,
        })
        .collect()
}

/// Metrics from raw scores; `correct[i]` says whether ID test sample `i`
/// was classified correctly.
pub fn metrics_from_scores(scorer: &str, scores: &LabeledScores, correct: &[bool]) -> Result<MetricsRow> {
    let co = ConfidenceOutcomes::new(scores.id_scores.clone(), correct.to_vec())?;
    let aupr_err = match metrics::aupr_err(&co) {
        Ok(v) => v,
        Err(Error::NoPositives(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(MetricsRow {
        scorer: scorer.to_string(),
        auroc: metrics::auroc(scores)?,
        aupr: metrics::aupr(scores)?,
        fpr95: metrics::fpr95(scores)?,
        aurc: metrics::aurc(&co)?,
        e_aurc: metrics::e_aurc(&co)?,
        aupr_err,
        acc: co.accuracy(),
    })
}

/// ID test samples take ids `0..n_id`, OOD samples continue from there.
pub fn scores_csv(scores: &LabeledScores) -> String {
    let mut s = format!("{SCORES_HEADER}\n");
    let n = scores.id_scores.len();
    for (i, v) in scores.id_scores.iter().enumerate() {
        s.push_str(&format!("{i},id_test,{v:?}\n"));
    }
    for (i, v) in scores.ood_scores.iter().enumerate() {
        s.push_str(&format!("{},ood,{v:?}\n", n + i));
    }
    s
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn body_lines<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(parse_err(1, 1, format!("expected header '{header}'")));
    }
    Ok(lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 2, l.split(',').collect())))
}

pub fn parse_scores_csv(text: &str) -> Result<LabeledScores> {
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for (line, f) in body_lines(text, SCORES_HEADER)? {
        if f.len() != 3 {
            return Err(parse_err(line, f.len(), "expected 3 fields"));
        }
        let v: f64 = f[2].parse().map_err(|_| parse_err(line, 3, "score is not a number"))?;
        match f[1] {
            "id_test" | "id_train" => id.push(v),
            "ood" => ood.push(v),
            other => return Err(parse_err(line, 2, format!("unknown provenance '{other}'"))),
        }
    }
    Ok(LabeledScores::new(id, ood))
}

pub fn predictions_csv(labels: &[usize], predictions: &[usize]) -> String {
    let mut s = format!("{PREDICTIONS_HEADER}\n");
    for (i, (y, p)) in labels.iter().zip(predictions).enumerate() {
        s.push_str(&format!("{i},{y},{p}\n"));
    }
    s
}

/// `correct` flags in sample-id order.
pub fn parse_predictions_csv(text: &str) -> Result<Vec<bool>> {
    body_lines(text, PREDICTIONS_HEADER)?
        .map(|(line, f)| {
            if f.len() != 3 {
                return Err(parse_err(line, f.len(), "expected 3 fields"));
            }
            let y: usize = f[1].parse().map_err(|_| parse_err(line, 2, "bad label"))?;
            let p: usize = f[2].parse().map_err(|_| parse_err(line, 3, "bad prediction"))?;
            Ok(y == p)
        })
        .collect()
}

pub fn curves_csv(log: &RunLog) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for r in &log.rows {
        s.push_str(&format!(
            "{},{},{:?},{},{},{},{:?},{:?},{:?}\n",
            r.round, r.epoch, r.sparsity, r.model, r.scorer, r.ood_set, r.auroc, r.fpr95, r.test_err
        ));
    }
    s
}

fn primary_scorer(log: &RunLog) -> Option<Scorer> {
    log.rows.first().map(|r| r.scorer)
}

pub fn epoch_plot(log: &RunLog) -> LinePlot {
    let mut series = Vec::new();
    if let Some(scorer) = primary_scorer(log) {
        let rounds = log.last_round().unwrap_or(0);
        for round in 0..=rounds {
            for model in [ModelKind::Online, ModelKind::Averaged] {
                let pts: Vec<(f64, f64)> = log
                    .auroc_series(round, model, scorer)
                    .into_iter()
                    .map(|(e, a)| (e as f64, a))
                    .collect();
                if !pts.is_empty() {
                    series.push(Series {
                        name: format!("round {round} {model}"),
                        points: pts,
                    });
                }
            }
        }
    }
    LinePlot {
        title: format!("AUROC over training ({})", primary_scorer(log).map_or("-", |s| s.name())),
        x_label: "epoch".into(),
        y_label: "AUROC".into(),
        series,
    }
}

pub fn sparsity_plot(log: &RunLog) -> LinePlot {
    let mut series = Vec::new();
    if let Some(scorer) = primary_scorer(log) {
        for model in [ModelKind::Online, ModelKind::Averaged] {
            let mut pts = Vec::new();
            for round in 0..=log.last_round().unwrap_or(0) {
                if let Some(r) = log
                    .final_rows(round)
                    .into_iter()
                    .find(|r| r.model == model && r.scorer == scorer)
                {
                    pts.push((r.sparsity, r.auroc));
                }
            }
            if !pts.is_empty() {
                series.push(Series {
                    name: model.to_string(),
                    points: pts,
                });
            }
        }
    }
    LinePlot {
        title: "Final AUROC against sparsity".into(),
        x_label: "sparsity".into(),
        y_label: "AUROC".into(),
        series,
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `curves.csv`, `auroc_vs_epoch.svg` and
/// `auroc_vs_sparsity.svg`.
pub fn emit_report(log: &RunLog, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(out_dir, "metrics.csv", &metrics_csv(&metrics_from_runlog(log)))?;
    write(out_dir, "curves.csv", &curves_csv(log))?;
    write(out_dir, "auroc_vs_epoch.svg", &epoch_plot(log).render())?;
    write(out_dir, "auroc_vs_sparsity.svg", &sparsity_plot(log).render())?;
    Ok(())
}

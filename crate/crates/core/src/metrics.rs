//! Threshold-free detection metrics (ID is the positive class) and
//! selective-prediction metrics for misclassification detection.
//!
//! Every sweep groups tied scores into a single threshold step, so ties earn
//! half credit in AUROC and move precision and recall together in AUPR.

use crate::error::{Error, Result};

/// Scores with the convention "higher means more in-distribution".
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl LabeledScores {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Self {
        Self {
            id_scores,
            ood_scores,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() {
            return Err(Error::Empty("no ID scores".into()));
        }
        if self.ood_scores.is_empty() {
            return Err(Error::Empty("no OOD scores".into()));
        }
        if !self
            .id_scores
            .iter()
            .chain(&self.ood_scores)
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceOutcomes {
    pub confidence: Vec<f64>,
    pub correct: Vec<bool>,
}

impl ConfidenceOutcomes {
    pub fn new(confidence: Vec<f64>, correct: Vec<bool>) -> Result<Self> {
        if confidence.len() != correct.len() {
            return Err(Error::shape(
                "ConfidenceOutcomes",
                format!("{} confidences, {} outcomes", confidence.len(), correct.len()),
            ));
        }
        Ok(Self {
            confidence,
            correct,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.confidence.is_empty() {
            return Err(Error::Empty("no predictions".into()));
        }
        if !self.confidence.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("confidences must be finite".into()));
        }
        Ok(())
    }

    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|c| **c).count() as f64 / self.correct.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `+∞` first, then each distinct score in descending order.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

/// Cumulative `(positives, negatives)` at or above each distinct score,
/// descending, starting from `(0, 0)` at `+∞`.
fn sweep(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<(usize, usize)>) {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut thresholds = vec![f64::INFINITY];
    let mut counts = vec![(0usize, 0usize)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        counts.push((tp, fp));
    }
    (thresholds, counts)
}

pub fn roc_curve(s: &LabeledScores) -> Result<RocCurve> {
    s.validate()?;
    let (thresholds, counts) = sweep(&s.id_scores, &s.ood_scores);
    let np = s.id_scores.len() as f64;
    let nn = s.ood_scores.len() as f64;
    Ok(RocCurve {
        thresholds,
        tpr: counts.iter().map(|c| c.0 as f64 / np).collect(),
        fpr: counts.iter().map(|c| c.1 as f64 / nn).collect(),
    })
}

/// Trapezoidal area under the ROC curve. Equals the Mann–Whitney statistic
/// with half credit for tied pairs.
pub fn auroc(s: &LabeledScores) -> Result<f64> {
    s.validate()?;
    let (_, counts) = sweep(&s.id_scores, &s.ood_scores);
    let np = s.id_scores.len() as f64;
    let nn = s.ood_scores.len() as f64;
    // accumulate in integer-scaled units: Σ Δfp · (tp_prev + tp)
    let mut area2 = 0.0;
    for w in counts.windows(2) {
        let dfp = (w[1].1 - w[0].1) as f64;
        area2 += dfp * (w[0].0 + w[1].0) as f64;
    }
    Ok(area2 / (2.0 * np * nn))
}

/// Step-interpolated precision–recall area: `Σ Δrecall · precision` over the
/// descending threshold sweep.
fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    let (_, counts) = sweep(pos, neg);
    let np = pos.len() as f64;
    let mut area = 0.0;
    for w in counts.windows(2) {
        let dtp = w[1].0 - w[0].0;
        if dtp == 0 {
            continue;
        }
        let precision = w[1].0 as f64 / (w[1].0 + w[1].1) as f64;
        area += (dtp as f64 / np) * precision;
    }
    area
}

/// AUPR with ID samples as positives.
pub fn aupr(s: &LabeledScores) -> Result<f64> {
    s.validate()?;
    Ok(average_precision(&s.id_scores, &s.ood_scores))
}

/// Smallest `k` with `k / n ≥ target`.
fn admitted_count(n: usize, target: f64) -> usize {
    let mut k = (target * n as f64).ceil().max(1.0) as usize;
    k = k.min(n);
    while k > 1 && (k - 1) as f64 / n as f64 >= target {
        k -= 1;
    }
    while k < n && (k as f64 / n as f64) < target {
        k += 1;
    }
    k
}

/// Fraction of OOD samples accepted at the highest threshold that still
/// accepts at least `tpr_target` of the ID samples.
pub fn fpr_at_tpr(s: &LabeledScores, tpr_target: f64) -> Result<f64> {
    s.validate()?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "TPR target must lie in (0,1], got {tpr_target}"
        )));
    }
    let mut id = s.id_scores.clone();
    id.sort_by(|a, b| b.total_cmp(a));
    let k = admitted_count(id.len(), tpr_target);
    let threshold = id[k - 1];
    let accepted = s.ood_scores.iter().filter(|&&v| v >= threshold).count();
    Ok(accepted as f64 / s.ood_scores.len() as f64)
}

pub fn fpr95(s: &LabeledScores) -> Result<f64> {
    fpr_at_tpr(s, 0.95)
}

fn aurc_of_order(errors_in_order: impl Iterator<Item = bool>, n: usize) -> f64 {
    let mut errs = 0usize;
    let mut total = 0.0;
    for (i, wrong) in errors_in_order.enumerate() {
        if wrong {
            errs += 1;
        }
        total += errs as f64 / (i + 1) as f64;
    }
    total / n as f64
}

/// Area under the risk–coverage curve: predictions are accepted in order of
/// decreasing confidence (ties by index) and the selective risk is averaged
/// over the coverages `1/n, 2/n, …, 1`.
pub fn aurc(c: &ConfidenceOutcomes) -> Result<f64> {
    c.validate()?;
    let mut order: Vec<usize> = (0..c.confidence.len()).collect();
    order.sort_by(|&a, &b| c.confidence[b].total_cmp(&c.confidence[a]));
    Ok(aurc_of_order(
        order.iter().map(|&i| !c.correct[i]),
        order.len(),
    ))
}

/// AURC of the hindsight-optimal ordering (every correct prediction first).
pub fn optimal_aurc(n: usize, errors: usize) -> f64 {
    let correct = n - errors;
    aurc_of_order((0..n).map(|i| i >= correct), n)
}

/// Excess AURC over the hindsight-optimal ordering.
pub fn e_aurc(c: &ConfidenceOutcomes) -> Result<f64> {
    let a = aurc(c)?;
    let errors = c.correct.iter().filter(|x| !**x).count();
    Ok(a - optimal_aurc(c.correct.len(), errors))
}

/// AUPR with misclassified samples as positives, ranked by `−confidence`.
pub fn aupr_err(c: &ConfidenceOutcomes) -> Result<f64> {
    c.validate()?;
    let pos: Vec<f64> = c
        .confidence
        .iter()
        .zip(&c.correct)
        .filter(|(_, ok)| !**ok)
        .map(|(v, _)| -v)
        .collect();
    if pos.is_empty() {
        return Err(Error::NoPositives("every prediction is correct".into()));
    }
    let neg: Vec<f64> = c
        .confidence
        .iter()
        .zip(&c.correct)
        .filter(|(_, ok)| **ok)
        .map(|(v, _)| -v)
        .collect();
    Ok(average_precision(&pos, &neg))
}

/// The three detection numbers reported for every scorer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionSummary {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
}

pub fn detection_summary(s: &LabeledScores) -> Result<DetectionSummary> {
    Ok(DetectionSummary {
        auroc: auroc(s)?,
        aupr: aupr(s)?,
        fpr95: fpr95(s)?,
    })
}

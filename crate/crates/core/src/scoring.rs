//! Post-hoc OOD scores. Every function returns one score per sample with the
//! convention "higher means more in-distribution".

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::netcore::{self, ForwardTrace, MlpSpec, ParamSet};
use crate::tensor::Tensor2;

/// Ridge added to the pooled covariance before inversion.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Msp,
    #[serde(rename = "maxlogit")]
    MaxLogit,
    Energy,
    Odin,
    #[serde(rename = "maha")]
    Mahalanobis,
    Knn,
    React,
}

impl Scorer {
    pub const ALL: [Scorer; 7] = [
        Scorer::Msp,
        Scorer::MaxLogit,
        Scorer::Energy,
        Scorer::Odin,
        Scorer::Mahalanobis,
        Scorer::Knn,
        Scorer::React,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Msp => "msp",
            Scorer::MaxLogit => "maxlogit",
            Scorer::Energy => "energy",
            Scorer::Odin => "odin",
            Scorer::Mahalanobis => "maha",
            Scorer::Knn => "knn",
            Scorer::React => "react",
        }
    }

    /// Whether the scorer needs statistics fitted on training features.
    pub fn needs_bank(self) -> bool {
        matches!(self, Scorer::Mahalanobis | Scorer::Knn | Scorer::React)
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown scorer '{s}' (expected one of msp, maxlogit, energy, odin, maha, knn, react)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub odin_temperature: f64,
    /// Input-perturbation size in units of the input scale.
    pub odin_epsilon: f64,
    pub energy_temperature: f64,
    pub knn_k: usize,
    pub react_percentile: f64,
    pub maha_epsilon: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            odin_temperature: 1000.0,
            odin_epsilon: 0.005,
            energy_temperature: 1.0,
            knn_k: 50,
            react_percentile: 90.0,
            maha_epsilon: 0.0,
        }
    }
}

impl ScorerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.odin_temperature > 0.0) {
            p.push("scorer_config.odin_temperature must be > 0".into());
        }
        if !(self.energy_temperature > 0.0) {
            p.push("scorer_config.energy_temperature must be > 0".into());
        }
        if !(self.odin_epsilon >= 0.0) {
            p.push("scorer_config.odin_epsilon must be >= 0".into());
        }
        if !(self.maha_epsilon >= 0.0) {
            p.push("scorer_config.maha_epsilon must be >= 0".into());
        }
        if self.knn_k == 0 {
            p.push("scorer_config.knn_k must be >= 1".into());
        }
        if !(self.react_percentile > 0.0 && self.react_percentile <= 100.0) {
            p.push("scorer_config.react_percentile must lie in (0,100]".into());
        }
        p
    }
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Maximum softmax probability.
pub fn score_msp(trace: &ForwardTrace) -> Vec<f64> {
    msp_of_logits(trace.logits(), 1.0)
}

fn msp_of_logits(logits: &Tensor2, temperature: f64) -> Vec<f64> {
    netcore::softmax_rows(logits, temperature)
        .row_iter()
        .map(row_max)
        .collect()
}

pub fn score_maxlogit(trace: &ForwardTrace) -> Vec<f64> {
    trace.logits().row_iter().map(row_max).collect()
}

/// Negative free energy `T·log Σ exp(z/T)`.
pub fn score_energy(trace: &ForwardTrace, temperature: f64) -> Vec<f64> {
    energy_of_logits(trace.logits(), temperature)
}

pub fn energy_of_logits(logits: &Tensor2, temperature: f64) -> Vec<f64> {
    logits
        .row_iter()
        .map(|r| {
            let scaled: Vec<f64> = r.iter().map(|v| v / temperature).collect();
            temperature * netcore::log_sum_exp(&scaled)
        })
        .collect()
}

/// ODIN: temperature-scaled MSP after a signed-gradient input step that
/// raises the confidence of the predicted class.
pub fn score_odin(
    spec: &MlpSpec,
    params: &ParamSet,
    batch: &Tensor2,
    temperature: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("ODIN epsilon must be >= 0, got {epsilon}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("ODIN temperature must be > 0".into()));
    }
    let trace = netcore::forward(spec, params, batch)?;
    if epsilon == 0.0 {
        return Ok(msp_of_logits(trace.logits(), temperature));
    }
    let pred = netcore::argmax_rows(trace.logits());
    let targets = netcore::one_hot(&pred, spec.num_classes);
    let weights = vec![1.0; batch.rows()];
    let out = netcore::backward_soft(spec, params, batch, &targets, &weights, temperature, None)?;
    let mut perturbed = batch.clone();
    for (x, g) in perturbed.data_mut().iter_mut().zip(out.input_grads.data()) {
        *x -= epsilon * sign(*g);
    }
    let t2 = netcore::forward(spec, params, &perturbed)?;
    Ok(msp_of_logits(t2.logits(), temperature))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Class-conditional Gaussian with a shared covariance, held as a Cholesky
/// factor.
#[derive(Debug, Clone)]
pub struct MahalanobisModel {
    means: Vec<DVector<f64>>,
    chol_l: DMatrix<f64>,
    condition: f64,
}

impl MahalanobisModel {
    /// `cov` is used as given (no ridge).
    pub fn new(means: &[Vec<f64>], cov: &Tensor2) -> Result<Self> {
        let dim = cov.rows();
        if cov.cols() != dim {
            return Err(Error::shape("covariance", "must be square"));
        }
        if means.is_empty() {
            return Err(Error::Empty("no class means".into()));
        }
        if let Some(m) = means.iter().find(|m| m.len() != dim) {
            return Err(Error::shape(
                "class mean",
                format!("length {} for a {dim}-dimensional covariance", m.len()),
            ));
        }
        let mut m = DMatrix::from_row_slice(dim, dim, cov.data());
        // symmetrize away rounding asymmetry
        m = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularCovariance { condition });
        }
        let chol = m
            .cholesky()
            .ok_or(Error::SingularCovariance { condition })?;
        Ok(Self {
            means: means.iter().map(|v| DVector::from_column_slice(v)).collect(),
            chol_l: chol.l(),
            condition,
        })
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    /// Squared distance to the nearest class mean and that class.
    fn nearest(&self, f: &[f64]) -> (f64, usize, DVector<f64>) {
        let x = DVector::from_column_slice(f);
        let mut best = (f64::INFINITY, 0, DVector::zeros(f.len()));
        for (c, mu) in self.means.iter().enumerate() {
            let diff = &x - mu;
            let z = self
                .chol_l
                .solve_lower_triangular(&diff)
                .expect("Cholesky factor has a positive diagonal");
            let d2 = z.norm_squared();
            if d2 < best.0 {
                best = (d2, c, diff);
            }
        }
        best
    }

    /// `−min_c (f−μ_c)ᵀ Σ⁻¹ (f−μ_c)` per row.
    pub fn score(&self, features: &Tensor2) -> Result<Vec<f64>> {
        if features.cols() != self.chol_l.nrows() {
            return Err(Error::shape(
                "Mahalanobis features",
                format!("{} columns, model has {}", features.cols(), self.chol_l.nrows()),
            ));
        }
        Ok(features.row_iter().map(|f| -self.nearest(f).0).collect())
    }

    /// Gradient of the nearest-class squared distance: `2 Σ⁻¹ (f − μ_c)`.
    fn distance_grad(&self, f: &[f64]) -> Vec<f64> {
        let (_, _, diff) = self.nearest(f);
        let z = self.chol_l.solve_lower_triangular(&diff).expect("positive diagonal");
        let w = self
            .chol_l
            .transpose()
            .solve_upper_triangular(&z)
            .expect("positive diagonal");
        w.iter().map(|v| 2.0 * v).collect()
    }
}

/// Statistics of training-set penultimate features used by the
/// Mahalanobis, KNN, and ReAct scorers.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub class_means: Vec<Vec<f64>>,
    /// Pooled within-class covariance plus the ridge.
    pub covariance: Tensor2,
    pub mahalanobis: MahalanobisModel,
    /// Unit-norm training features (zero rows stay zero).
    pub knn_bank: Tensor2,
    /// Per-coordinate ReAct clipping threshold.
    pub react_threshold: Vec<f64>,
}

fn normalize_rows(t: &Tensor2) -> Tensor2 {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Linear-interpolation percentile of a sorted slice.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn fit_feature_bank(
    spec: &MlpSpec,
    params: &ParamSet,
    train: &LabeledDataset,
    cfg: &ScorerConfig,
) -> Result<FeatureBank> {
    let labels = train
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("feature bank needs labeled training data".into()))?;
    let trace = netcore::forward(spec, params, &train.inputs)?;
    fit_bank_from_features(trace.features(), labels, spec.num_classes, cfg.react_percentile)
}

/// Bank from precomputed features. Every class needs at least one sample.
pub fn fit_bank_from_features(
    features: &Tensor2,
    labels: &[usize],
    num_classes: usize,
    react_percentile: f64,
) -> Result<FeatureBank> {
    if features.rows() == 0 {
        return Err(Error::Empty("feature bank training set".into()));
    }
    if labels.len() != features.rows() {
        return Err(Error::shape("feature bank labels", "one label per feature row required"));
    }
    if !(react_percentile > 0.0 && react_percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "ReAct percentile must lie in (0,100], got {react_percentile}"
        )));
    }
    let dim = features.cols();
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![vec![0.0; dim]; num_classes];
    for (f, &y) in features.row_iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
                sample: 0,
            });
        }
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(f) {
            *m += v;
        }
    }
    for (c, (m, &n)) in means.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(Error::InvalidArgument(format!("class {c} has no training samples")));
        }
        if n < 2 {
            log::warn!("class {c} has a single training sample; its scatter is zero");
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut cov = Tensor2::zeros(dim, dim);
    for (f, &y) in features.row_iter().zip(labels) {
        let diff: Vec<f64> = f.iter().zip(&means[y]).map(|(a, b)| a - b).collect();
        for i in 0..dim {
            let di = diff[i];
            if di == 0.0 {
                continue;
            }
            let row = cov.row_mut(i);
            for j in 0..dim {
                row[j] += di * diff[j];
            }
        }
    }
    let n = features.rows() as f64;
    cov.map_inplace(|v| v / n);
    for i in 0..dim {
        let v = cov.get(i, i) + COVARIANCE_RIDGE;
        cov.set(i, i, v);
    }
    let mahalanobis = MahalanobisModel::new(&means, &cov)?;

    let mut react_threshold = Vec::with_capacity(dim);
    let mut col = vec![0.0; features.rows()];
    for j in 0..dim {
        for (r, c) in col.iter_mut().enumerate() {
            *c = features.get(r, j);
        }
        col.sort_by(f64::total_cmp);
        react_threshold.push(percentile_sorted(&col, react_percentile));
    }

    Ok(FeatureBank {
        class_means: means,
        covariance: cov,
        mahalanobis,
        knn_bank: normalize_rows(features),
        react_threshold,
    })
}

pub fn score_mahalanobis(bank: &FeatureBank, features: &Tensor2) -> Result<Vec<f64>> {
    bank.mahalanobis.score(features)
}

/// Mahalanobis score after an input step of size `epsilon` that lowers the
/// nearest-class distance; `epsilon = 0` is the plain distance score.
pub fn score_mahalanobis_input(
    spec: &MlpSpec,
    params: &ParamSet,
    bank: &FeatureBank,
    batch: &Tensor2,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument("Mahalanobis epsilon must be >= 0".into()));
    }
    let trace = netcore::forward(spec, params, batch)?;
    if epsilon == 0.0 {
        return score_mahalanobis(bank, trace.features());
    }
    let feats = trace.features();
    let mut d_feat = Tensor2::zeros(feats.rows(), feats.cols());
    for r in 0..feats.rows() {
        d_feat.row_mut(r).copy_from_slice(&bank.mahalanobis.distance_grad(feats.row(r)));
    }
    let n = params.layers.len();
    let input_grads = if n >= 2 {
        netcore::backprop(params, &trace, n - 2, d_feat, None).1
    } else {
        d_feat
    };
    let mut perturbed = batch.clone();
    for (x, g) in perturbed.data_mut().iter_mut().zip(input_grads.data()) {
        *x -= epsilon * sign(*g);
    }
    let t2 = netcore::forward(spec, params, &perturbed)?;
    score_mahalanobis(bank, t2.features())
}

/// `−` distance from the normalized feature to its `k`-th nearest normalized
/// bank feature. `k` larger than the bank is clamped with a warning.
pub fn score_knn(bank: &FeatureBank, features: &Tensor2, k: usize) -> Result<Vec<f64>> {
    knn_scores(&bank.knn_bank, features, k)
}

pub fn knn_scores(bank: &Tensor2, features: &Tensor2, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if bank.rows() == 0 {
        return Err(Error::Empty("KNN bank".into()));
    }
    if features.cols() != bank.cols() {
        return Err(Error::shape(
            "KNN features",
            format!("{} columns, bank has {}", features.cols(), bank.cols()),
        ));
    }
    let k = if k > bank.rows() {
        log::warn!("knn k={k} exceeds bank size {}; clamping", bank.rows());
        bank.rows()
    } else {
        k
    };
    let q = normalize_rows(features);
    let mut d2 = vec![0.0; bank.rows()];
    Ok(q.row_iter()
        .map(|f| {
            for (slot, b) in d2.iter_mut().zip(bank.row_iter()) {
                *slot = f.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            }
            let (_, kth, _) = d2.select_nth_unstable_by(k - 1, f64::total_cmp);
            -kth.sqrt()
        })
        .collect())
}

/// Energy score after clipping penultimate activations at `threshold`.
pub fn react_energy_from_features(
    params: &ParamSet,
    features: &Tensor2,
    threshold: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    if threshold.len() != features.cols() {
        return Err(Error::shape(
            "ReAct threshold",
            format!("{} thresholds for {} features", threshold.len(), features.cols()),
        ));
    }
    let mut clipped = features.clone();
    for r in 0..clipped.rows() {
        for (v, t) in clipped.row_mut(r).iter_mut().zip(threshold) {
            *v = v.min(*t);
        }
    }
    let logits = netcore::logits_from_features(params, &clipped);
    Ok(energy_of_logits(&logits, temperature))
}

pub fn score_react_energy(
    spec: &MlpSpec,
    params: &ParamSet,
    bank: &FeatureBank,
    batch: &Tensor2,
    temperature: f64,
) -> Result<Vec<f64>> {
    let trace = netcore::forward(spec, params, batch)?;
    react_energy_from_features(params, trace.features(), &bank.react_threshold, temperature)
}

/// Cross-entropy on ID samples plus `weight` times the mean
/// `KL(uniform ‖ softmax)` on outliers. The KL form is cross-entropy to the
/// uniform target minus `ln K`, so uniform outlier logits contribute 0.
pub fn oe_loss(
    id_trace: &ForwardTrace,
    labels: &[usize],
    ood_trace: &ForwardTrace,
    weight: f64,
) -> Result<f64> {
    if !(weight >= 0.0) {
        return Err(Error::InvalidArgument(format!("OE weight must be >= 0, got {weight}")));
    }
    let logits = id_trace.logits();
    if labels.len() != logits.rows() {
        return Err(Error::shape("OE labels", "one label per ID sample required"));
    }
    if logits.rows() == 0 {
        return Err(Error::Empty("ID batch".into()));
    }
    let k = logits.cols();
    let mut ce = 0.0;
    for (r, &y) in logits.row_iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: k,
                sample: 0,
            });
        }
        ce += netcore::log_sum_exp(r) - r[y];
    }
    ce /= logits.rows() as f64;
    if weight == 0.0 {
        return Ok(ce);
    }
    let ood = ood_trace.logits();
    if ood.rows() == 0 {
        return Err(Error::Empty("outlier batch".into()));
    }
    let ln_k = (k as f64).ln();
    let mut kl = 0.0;
    for r in ood.row_iter() {
        let mean_logit = r.iter().sum::<f64>() / k as f64;
        kl += netcore::log_sum_exp(r) - mean_logit - ln_k;
    }
    Ok(ce + weight * kl / ood.rows() as f64)
}

/// Scores `batch` with any scorer. Bank-based scorers need `bank`.
pub fn score_batch(
    scorer: Scorer,
    spec: &MlpSpec,
    params: &ParamSet,
    bank: Option<&FeatureBank>,
    batch: &Tensor2,
    cfg: &ScorerConfig,
) -> Result<Vec<f64>> {
    let need_bank = || {
        bank.ok_or_else(|| {
            Error::InvalidArgument(format!("scorer '{scorer}' needs a fitted feature bank"))
        })
    };
    match scorer {
        Scorer::Msp => Ok(score_msp(&netcore::forward(spec, params, batch)?)),
        Scorer::MaxLogit => Ok(score_maxlogit(&netcore::forward(spec, params, batch)?)),
        Scorer::Energy => Ok(score_energy(
            &netcore::forward(spec, params, batch)?,
            cfg.energy_temperature,
        )),
        Scorer::Odin => score_odin(spec, params, batch, cfg.odin_temperature, cfg.odin_epsilon),
        Scorer::Mahalanobis => {
            score_mahalanobis_input(spec, params, need_bank()?, batch, cfg.maha_epsilon)
        }
        Scorer::Knn => {
            let trace = netcore::forward(spec, params, batch)?;
            score_knn(need_bank()?, trace.features(), cfg.knn_k)
        }
        Scorer::React => {
            score_react_energy(spec, params, need_bank()?, batch, cfg.energy_temperature)
        }
    }
}

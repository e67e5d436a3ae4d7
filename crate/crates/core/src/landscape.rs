//! One-dimensional weight-space scans: detection and accuracy of
//! `θ + α·d` for a random Gaussian direction `d`.

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{self, LabeledScores};
use crate::netcore::{self, MlpSpec, ParamSet};
use crate::rng;
use crate::scoring::{self, Scorer, ScorerConfig};
use crate::tensor::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DirectionNormalization {
    /// Each output-unit row takes the norm of the matching weight row; bias
    /// directions are zero.
    #[default]
    PerUnitFilterwise,
    /// The whole direction takes the norm of the whole parameter vector.
    GlobalNorm,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSpec {
    pub seed: u64,
    #[serde(default)]
    pub normalization: DirectionNormalization,
    pub alphas: Vec<f64>,
}

/// 21 evenly spaced points on `[−scale, scale]`.
pub fn default_alphas(scale: f64) -> Vec<f64> {
    (0..21).map(|i| scale * (i as f64 - 10.0) / 10.0).collect()
}

pub fn make_direction(params: &ParamSet, spec: &DirectionSpec) -> ParamSet {
    let mut r = rng::rng_from(spec.seed, &[rng::TAG_DIRECTION]);
    let mut dir = params.zeros_like();
    for layer in &mut dir.layers {
        layer.weight.data_mut().iter_mut().for_each(|v| *v = rng::normal(&mut r));
        layer.bias.iter_mut().for_each(|v| *v = rng::normal(&mut r));
    }
    match spec.normalization {
        DirectionNormalization::None => {}
        DirectionNormalization::GlobalNorm => {
            let target = params.l2_norm();
            let have = dir.l2_norm();
            if have > 0.0 {
                dir.scale(target / have);
            }
        }
        DirectionNormalization::PerUnitFilterwise => {
            for (d, p) in dir.layers.iter_mut().zip(&params.layers) {
                for o in 0..p.weight.rows() {
                    let target = l2_norm(p.weight.row(o));
                    let row = d.weight.row_mut(o);
                    let have = l2_norm(row);
                    if target == 0.0 || have == 0.0 {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    } else {
                        let c = target / have;
                        row.iter_mut().for_each(|v| *v *= c);
                    }
                }
                d.bias.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    dir
}

/// `θ + α·d`; `α = 0` returns `θ` untouched.
pub fn perturb(params: &ParamSet, direction: &ParamSet, alpha: f64) -> Result<ParamSet> {
    params.ensure_same_shape(direction, "landscape direction")?;
    let mut out = params.clone();
    if alpha != 0.0 {
        out.axpy(alpha, direction);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeRow {
    pub alpha: f64,
    pub auroc: f64,
    pub fpr95: f64,
    pub acc: f64,
    /// Logits or scores were non-finite; metrics are NaN.
    pub flagged: bool,
}

/// Evaluates every `α` with a logit-based scorer. Rows whose logits blow up
/// are flagged and the scan moves on.
#[allow(clippy::too_many_arguments)]
pub fn landscape_scan(
    spec: &MlpSpec,
    params: &ParamSet,
    direction: &ParamSet,
    alphas: &[f64],
    id_data: &LabeledDataset,
    ood_data: &LabeledDataset,
    scorer: Scorer,
    cfg: &ScorerConfig,
) -> Result<Vec<LandscapeRow>> {
    if scorer.needs_bank() {
        return Err(Error::InvalidArgument(format!(
            "landscape scans support logit-based scorers only, not '{scorer}'"
        )));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument("alphas must be finite".into()));
    }
    params.check_matches(spec)?;
    let labels = id_data
        .labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("ID scan data must be labeled".into()))?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let theta = perturb(params, direction, alpha)?;
        let eval = || -> Result<Option<(f64, f64, f64)>> {
            let tid = netcore::forward(spec, &theta, &id_data.inputs)?;
            if !tid.logits().is_finite() {
                return Ok(None);
            }
            let s_id = scoring::score_batch(scorer, spec, &theta, None, &id_data.inputs, cfg)?;
            let s_ood = scoring::score_batch(scorer, spec, &theta, None, &ood_data.inputs, cfg)?;
            if !s_id.iter().chain(&s_ood).all(|v| v.is_finite()) {
                return Ok(None);
            }
            let ls = LabeledScores::new(s_id, s_ood);
            let pred = netcore::argmax_rows(tid.logits());
            let acc = pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64
                / labels.len().max(1) as f64;
            Ok(Some((metrics::auroc(&ls)?, metrics::fpr95(&ls)?, acc)))
        };
        rows.push(match eval()? {
            Some((auroc, fpr95, acc)) => LandscapeRow {
                alpha,
                auroc,
                fpr95,
                acc,
                flagged: false,
            },
            None => {
                log::warn!("non-finite outputs at alpha={alpha}; row flagged");
                LandscapeRow {
                    alpha,
                    auroc: f64::NAN,
                    fpr95: f64::NAN,
                    acc: f64::NAN,
                    flagged: true,
                }
            }
        });
    }
    Ok(rows)
}

/// `max − min` AUROC over unflagged rows with `α ∈ [lo, hi]`.
pub fn auroc_range(rows: &[LandscapeRow], lo: f64, hi: f64) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| !r.flagged && r.alpha >= lo && r.alpha <= hi)
        .map(|r| r.auroc)
        .collect();
    if vals.is_empty() {
        return None;
    }
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    Some(max - min)
}

pub const LANDSCAPE_HEADER: &str = "direction_seed,alpha,auroc,fpr95,acc";

pub fn landscape_csv(scans: &[(u64, Vec<LandscapeRow>)]) -> String {
    let mut s = format!("{LANDSCAPE_HEADER}\n");
    for (seed, rows) in scans {
        for r in rows {
            s.push_str(&format!(
                "{seed},{:?},{:?},{:?},{:?}\n",
                r.alpha, r.auroc, r.fpr95, r.acc
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2;

    #[test]
    fn filterwise_rows_match_weight_norms() {
        let spec = MlpSpec::new(4, vec![3], 2);
        let mut p = ParamSet::init(&spec, 1);
        p.layers[0].weight.row_mut(1).iter_mut().for_each(|v| *v = 0.0);
        let d = make_direction(
            &p,
            &DirectionSpec {
                seed: 7,
                normalization: DirectionNormalization::PerUnitFilterwise,
                alphas: vec![0.0],
            },
        );
        for (dl, pl) in d.layers.iter().zip(&p.layers) {
            for o in 0..pl.weight.rows() {
                let want = l2_norm(pl.weight.row(o));
                assert!((l2_norm(dl.weight.row(o)) - want).abs() <= 1e-12 * want.max(1.0));
            }
            assert!(dl.bias.iter().all(|b| *b == 0.0));
        }
        assert!(d.layers[0].weight.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn row_norm_two_example() {
        let spec = MlpSpec::new(2, vec![], 2);
        let mut p = ParamSet::zeros(&spec);
        p.layers[0].weight = Tensor2::from_vec(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let d = make_direction(
            &p,
            &DirectionSpec {
                seed: 3,
                normalization: DirectionNormalization::PerUnitFilterwise,
                alphas: vec![],
            },
        );
        assert!((l2_norm(d.layers[0].weight.row(0)) - 2.0).abs() < 1e-12);
        assert_eq!(l2_norm(d.layers[0].weight.row(1)), 0.0);
    }

    #[test]
    fn global_norm_matches() {
        let spec = MlpSpec::new(5, vec![4], 3);
        let p = ParamSet::init(&spec, 2);
        let d = make_direction(
            &p,
            &DirectionSpec {
                seed: 1,
                normalization: DirectionNormalization::GlobalNorm,
                alphas: vec![],
            },
        );
        assert!((d.l2_norm() - p.l2_norm()).abs() <= 1e-12 * p.l2_norm());
    }

    #[test]
    fn perturbation_round_trips() {
        let spec = MlpSpec::new(5, vec![4], 3);
        let p = ParamSet::init(&spec, 2);
        let d = make_direction(
            &p,
            &DirectionSpec {
                seed: 1,
                normalization: DirectionNormalization::None,
                alphas: vec![],
            },
        );
        let q = perturb(&p, &d, 0.37).unwrap();
        let back = perturb(&q, &d, -0.37).unwrap();
        assert!(back.max_abs_diff(&p) <= 1e-12);
        assert_eq!(perturb(&p, &d, 0.0).unwrap(), p);
    }

    #[test]
    fn default_grid_includes_zero() {
        let a = default_alphas(0.5);
        assert_eq!(a.len(), 21);
        assert_eq!(a[10], 0.0);
        assert_eq!((a[0], a[20]), (-0.5, 0.5));
    }
}

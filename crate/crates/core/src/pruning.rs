//! Unstructured sparsity: masks over weight matrices, global magnitude
//! pruning, and iterative magnitude pruning with weight rewinding.
//!
//! Only weight matrices are prunable. Biases are always kept and never
//! appear in a mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{self, LabeledScores};
use crate::netcore::{self, MlpSpec, ParamSet, SgdConfig};
use crate::rng;
use crate::scoring;
use crate::training::{self, RoundEvent, TrainData, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    layers: Vec<Vec<bool>>,
    kept_count: usize,
}

impl SparsityMask {
    pub fn full(spec: &MlpSpec) -> Self {
        let layers: Vec<Vec<bool>> = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| vec![true; i * o])
            .collect();
        let kept_count = layers.iter().map(Vec::len).sum();
        Self { layers, kept_count }
    }

    pub fn full_like(params: &ParamSet) -> Self {
        let layers: Vec<Vec<bool>> = params
            .layers
            .iter()
            .map(|l| vec![true; l.weight.data().len()])
            .collect();
        let kept_count = layers.iter().map(Vec::len).sum();
        Self { layers, kept_count }
    }

    /// Builds a mask from the flat weight bit order (layer by layer, row-major).
    pub fn from_flat_bits(spec: &MlpSpec, bits: &[bool]) -> Result<Self> {
        let mut mask = Self::full(spec);
        if bits.len() != mask.prunable_count() {
            return Err(Error::shape(
                "SparsityMask::from_flat_bits",
                format!("{} bits for {} weights", bits.len(), mask.prunable_count()),
            ));
        }
        let mut off = 0;
        for layer in &mut mask.layers {
            let n = layer.len();
            layer.copy_from_slice(&bits[off..off + n]);
            off += n;
        }
        mask.recount();
        Ok(mask)
    }

    pub fn flat_bits(&self) -> Vec<bool> {
        self.layers.iter().flatten().copied().collect()
    }

    fn recount(&mut self) {
        self.kept_count = self.layers.iter().flatten().filter(|b| **b).count();
    }

    pub fn kept_count(&self) -> usize {
        self.kept_count
    }

    pub fn prunable_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Fraction of prunable weights removed.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_count as f64 / self.prunable_count().max(1) as f64
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    pub fn get(&self, layer: usize, idx: usize) -> bool {
        self.layers[layer][idx]
    }

    pub fn set(&mut self, layer: usize, idx: usize, keep: bool) {
        let old = std::mem::replace(&mut self.layers[layer][idx], keep);
        match (old, keep) {
            (true, false) => self.kept_count -= 1,
            (false, true) => self.kept_count += 1,
            _ => {}
        }
    }

    pub fn clear_layer(&mut self, layer: usize) {
        self.layers[layer].iter_mut().for_each(|b| *b = false);
        self.recount();
    }

    /// Every weight kept here is also kept in `other`.
    pub fn is_subset_of(&self, other: &SparsityMask) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| !*x || *y))
    }

    pub(crate) fn check_aligned(&self, params: &ParamSet) -> Result<()> {
        let ok = self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(m, l)| m.len() == l.weight.data().len());
        if ok {
            Ok(())
        } else {
            Err(Error::shape("mask", "mask is not aligned with the parameters"))
        }
    }

    /// Sets masked weights of `params` to zero in place.
    pub(crate) fn zero_masked(&self, params: &mut ParamSet) {
        for (m, l) in self.layers.iter().zip(&mut params.layers) {
            for (w, keep) in l.weight.data_mut().iter_mut().zip(m) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
}

/// `m ⊙ θ`: masked weights become exactly zero, everything else is untouched.
pub fn apply_mask(params: &ParamSet, mask: &SparsityMask) -> Result<ParamSet> {
    mask.check_aligned(params)?;
    let mut out = params.clone();
    mask.zero_masked(&mut out);
    Ok(out)
}

fn removal_count(mask: &SparsityMask, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "prune fraction must lie in (0,1), got {fraction}"
        )));
    }
    let kept = mask.kept_count();
    if kept < 2 {
        return Err(Error::PruneEverything {
            kept,
            requested: kept,
        });
    }
    let k = (fraction * kept as f64).floor() as usize;
    if k >= kept {
        return Err(Error::PruneEverything { kept, requested: k });
    }
    Ok(k)
}

/// Removes `⌊fraction · kept⌋` surviving weights with the smallest `|θ|`,
/// ranked jointly across all layers. Among equal magnitudes the lower flat
/// index survives.
pub fn global_magnitude_prune(
    params: &ParamSet,
    mask: &SparsityMask,
    fraction: f64,
) -> Result<SparsityMask> {
    mask.check_aligned(params)?;
    let k = removal_count(mask, fraction)?;
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(mask.kept_count());
    let mut flat = 0usize;
    for (m, layer) in mask.layers.iter().zip(&params.layers) {
        for (&keep, w) in m.iter().zip(layer.weight.data()) {
            if keep {
                candidates.push((w.abs(), flat));
            }
            flat += 1;
        }
    }
    // smallest magnitude first; on ties the higher flat index goes first
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut out = mask.clone();
    let offsets = layer_offsets(mask);
    for &(_, flat) in candidates.iter().take(k) {
        let (l, i) = locate(&offsets, flat);
        out.set(l, i, false);
    }
    Ok(out)
}

/// Removes `⌊fraction · kept⌋` surviving weights chosen uniformly at random.
pub fn random_prune(mask: &SparsityMask, fraction: f64, seed: u64) -> Result<SparsityMask> {
    let k = removal_count(mask, fraction)?;
    let offsets = layer_offsets(mask);
    let mut alive: Vec<usize> = mask
        .flat_bits()
        .iter()
        .enumerate()
        .filter(|(_, b)| **b)
        .map(|(i, _)| i)
        .collect();
    let mut rng = rng::rng_from(seed, &[rng::TAG_PRUNE]);
    // partial Fisher–Yates: the first k slots become the removed set
    for i in 0..k {
        let j = rng.random_range(i..alive.len());
        alive.swap(i, j);
    }
    let mut out = mask.clone();
    for &flat in &alive[..k] {
        let (l, i) = locate(&offsets, flat);
        out.set(l, i, false);
    }
    Ok(out)
}

fn layer_offsets(mask: &SparsityMask) -> Vec<usize> {
    let mut offs = Vec::with_capacity(mask.layers.len() + 1);
    let mut acc = 0;
    offs.push(0);
    for l in &mask.layers {
        acc += l.len();
        offs.push(acc);
    }
    offs
}

fn locate(offsets: &[usize], flat: usize) -> (usize, usize) {
    let l = offsets.partition_point(|&o| o <= flat) - 1;
    (l, flat - offsets[l])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImpVariant {
    /// Prune by magnitude, rewind survivors to `θ_k`.
    #[default]
    Rewind,
    /// Prune by magnitude, keep training from the previous round's `θ_T`.
    Finetune,
    /// Prune uniformly at random, rewind survivors to `θ_k`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpConfig {
    /// Rewind point `k`, in completed epochs.
    #[serde(default = "default_rewind")]
    pub rewind_epoch: usize,
    pub rounds: usize,
    #[serde(default = "default_fraction")]
    pub prune_fraction: f64,
    #[serde(default)]
    pub variant: ImpVariant,
}

fn default_rewind() -> usize {
    2
}

fn default_fraction() -> f64 {
    0.2
}

impl Default for ImpConfig {
    fn default() -> Self {
        Self {
            rewind_epoch: default_rewind(),
            rounds: 9,
            prune_fraction: default_fraction(),
            variant: ImpVariant::Rewind,
        }
    }
}

impl ImpConfig {
    pub fn problems(&self, train_epochs: usize) -> Vec<String> {
        let mut p = Vec::new();
        if self.rewind_epoch >= train_epochs {
            p.push(format!(
                "imp.rewind_epoch ({}) must be smaller than epochs ({train_epochs})",
                self.rewind_epoch
            ));
        }
        if self.rounds == 0 {
            p.push("imp.rounds must be >= 1".into());
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            p.push(format!("imp.prune_fraction must lie in (0,1), got {}", self.prune_fraction));
        }
        p
    }
}

/// Output of one IMP round.
#[derive(Debug, Clone)]
pub struct ImpRound {
    pub round: usize,
    pub mask: SparsityMask,
    /// Weights the round started training from.
    pub start_params: ParamSet,
    pub trained: ParamSet,
    pub test_acc: f64,
    /// MSP AUROC of the trained weights against the OOD set.
    pub auroc: f64,
}

/// Iterative magnitude pruning: round 0 trains the dense net from `θ_0`
/// (capturing `θ_k`), and each later round prunes, resets the surviving
/// weights according to the variant, and retrains epochs `k+1..=T`.
pub fn imp_run(
    spec: &MlpSpec,
    init_seed: u64,
    sgd: &SgdConfig,
    cfg: &ImpConfig,
    schedule: &TrainSchedule,
    data: &TrainData<'_>,
) -> Result<Vec<ImpRound>> {
    let mut rounds: Vec<ImpRound> = Vec::new();
    let mut pending: Option<(usize, SparsityMask, ParamSet)> = None;
    let init = ParamSet::init(spec, init_seed);
    training::run_rounds(
        spec,
        &init,
        sgd,
        Some(cfg),
        schedule,
        data,
        None,
        None,
        &mut |ev| {
            match ev {
                RoundEvent::RoundStart {
                    round,
                    mask,
                    start_params,
                } => pending = Some((round, mask.clone(), start_params.clone())),
                RoundEvent::RoundEnd { round, params, .. } => {
                    let (r, mask, start) = pending.take().expect("round start precedes end");
                    debug_assert_eq!(r, round);
                    let test_acc = netcore::accuracy(spec, params, data.test)?;
                    let auroc = msp_auroc(spec, params, data.test, data.ood)?;
                    rounds.push(ImpRound {
                        round,
                        mask,
                        start_params: start,
                        trained: params.clone(),
                        test_acc,
                        auroc,
                    });
                }
                _ => {}
            }
            Ok(())
        },
    )?;
    Ok(rounds)
}

pub(crate) fn msp_auroc(
    spec: &MlpSpec,
    params: &ParamSet,
    id: &LabeledDataset,
    ood: &LabeledDataset,
) -> Result<f64> {
    let s_id = scoring::score_msp(&netcore::forward(spec, params, &id.inputs)?);
    let s_ood = scoring::score_msp(&netcore::forward(spec, params, &ood.inputs)?);
    metrics::auroc(&LabeledScores::new(s_id, s_ood))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2;

    fn row_net(ws: &[f64]) -> (MlpSpec, ParamSet) {
        let spec = MlpSpec::new(ws.len(), vec![], 2);
        let mut p = ParamSet::zeros(&spec);
        p.layers[0].weight = Tensor2::from_vec(2, ws.len(), [ws, &vec![9.0; ws.len()][..]].concat()).unwrap();
        (spec, p)
    }

    #[test]
    fn prunes_smallest_magnitude() {
        let spec = MlpSpec::new(5, vec![], 2);
        let mut p = ParamSet::zeros(&spec);
        // second output row gets large weights so only row 0 competes
        p.layers[0].weight = Tensor2::from_vec(
            2,
            5,
            vec![0.1, -0.5, 0.3, 0.05, -0.2, 1.0, 1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let mask = SparsityMask::full(&spec);
        let m = global_magnitude_prune(&p, &mask, 0.2).unwrap();
        // floor(0.2 * 10) = 2 removed: 0.05 and 0.1
        assert_eq!(m.kept_count(), 8);
        assert!(!m.get(0, 3));
        assert!(!m.get(0, 0));
        assert!(m.get(0, 4));

        // the five-weight case on its own
        let single = MlpSpec::new(5, vec![], 2);
        let mut q = ParamSet::zeros(&single);
        q.layers[0].weight =
            Tensor2::from_vec(2, 5, vec![0.1, -0.5, 0.3, 0.05, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut five = SparsityMask::full(&single);
        for i in 5..10 {
            five.set(0, i, false);
        }
        let m = global_magnitude_prune(&q, &five, 0.2).unwrap();
        assert_eq!(m.kept_count(), 4);
        assert!(!m.get(0, 3), "the 0.05 entry goes");
    }

    #[test]
    fn ties_keep_lower_flat_index() {
        let (_, p) = row_net(&[0.5, 0.5, 0.5, 0.5]);
        let mask = SparsityMask::full_like(&p);
        // 8 weights, fraction 0.25 → remove 2 of the four tied 0.5 entries
        let m = global_magnitude_prune(&p, &mask, 0.25).unwrap();
        assert_eq!(m.kept_count(), 6);
        assert!(m.get(0, 0) && m.get(0, 1));
        assert!(!m.get(0, 2) && !m.get(0, 3));
    }

    #[test]
    fn nine_rounds_at_twenty_percent() {
        let spec = MlpSpec::new(100, vec![50], 10);
        let p = ParamSet::init(&spec, 1);
        let mut mask = SparsityMask::full(&spec);
        let mut kept = mask.kept_count();
        for _ in 0..9 {
            let next = global_magnitude_prune(&p, &mask, 0.2).unwrap();
            assert!(next.is_subset_of(&mask));
            assert_eq!(next.kept_count(), kept - (0.2 * kept as f64).floor() as usize);
            kept = next.kept_count();
            mask = next;
        }
        // 5500 weights: floor recursion lands on 740, close to 0.8^9 ≈ 0.1342
        assert_eq!(kept, 740);
        assert!((kept as f64 / 5500.0 - 0.8f64.powi(9)).abs() < 1e-3);
    }

    #[test]
    fn global_not_per_layer() {
        let spec = MlpSpec::new(2, vec![2], 2);
        let mut p = ParamSet::zeros(&spec);
        p.layers[0].weight = Tensor2::from_vec(2, 2, vec![1e-3, 2e-3, 3e-3, 4e-3]).unwrap();
        p.layers[1].weight = Tensor2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = global_magnitude_prune(&p, &SparsityMask::full(&spec), 0.5).unwrap();
        assert!(m.layer(0).iter().all(|b| !b));
        assert!(m.layer(1).iter().all(|b| *b));
    }

    #[test]
    fn everything_pruned_rejected() {
        let spec = MlpSpec::new(1, vec![], 2);
        let mut mask = SparsityMask::full(&spec);
        mask.set(0, 0, false);
        let p = ParamSet::zeros(&spec);
        assert!(matches!(
            global_magnitude_prune(&p, &mask, 0.5),
            Err(Error::PruneEverything { .. })
        ));
        assert!(global_magnitude_prune(&p, &SparsityMask::full(&spec), 1.0).is_err());
    }

    #[test]
    fn random_prune_counts_and_nesting() {
        let spec = MlpSpec::new(10, vec![10], 3);
        let mask = SparsityMask::full(&spec);
        let m = random_prune(&mask, 0.2, 4).unwrap();
        assert_eq!(m.kept_count(), 130 - 26);
        assert!(m.is_subset_of(&mask));
        assert_eq!(m, random_prune(&mask, 0.2, 4).unwrap());
        assert_ne!(m, random_prune(&mask, 0.2, 5).unwrap());
    }

    #[test]
    fn apply_mask_contract() {
        let spec = MlpSpec::new(3, vec![4], 2);
        let p = ParamSet::init(&spec, 3);
        let full = SparsityMask::full(&spec);
        assert_eq!(apply_mask(&p, &full).unwrap(), p);
        let mut m = full.clone();
        m.clear_layer(1);
        let q = apply_mask(&p, &m).unwrap();
        assert!(q.layers[1].weight.data().iter().all(|&w| w == 0.0));
        assert_eq!(q.layers[1].bias, p.layers[1].bias);
        assert_eq!(q.layers[0], p.layers[0]);
        assert_eq!(apply_mask(&q, &m).unwrap(), q);
        let other = SparsityMask::full(&MlpSpec::new(2, vec![4], 2));
        assert!(apply_mask(&p, &other).is_err());
    }

    #[test]
    fn flat_bits_round_trip() {
        let spec = MlpSpec::new(3, vec![2], 2);
        let mut m = SparsityMask::full(&spec);
        m.set(1, 3, false);
        m.set(0, 0, false);
        let back = SparsityMask::from_flat_bits(&spec, &m.flat_bits()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.kept_count(), 8);
    }
}

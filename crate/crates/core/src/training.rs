//! The round-based training driver shared by dense training and IMP.
//!
//! Round 0 trains from the initial weights for epochs `1..=T`. With an
//! [`ImpConfig`], each later round prunes, resets the surviving weights, and
//! trains epochs `k+1..=T` with a fresh momentum buffer. Each epoch's
//! mini-batch order is seeded by `(seed, round, epoch)`, so any round can be
//! re-run in isolation from its persisted inputs.

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::netcore::{self, MlpSpec, OutlierExposure, ParamSet, SgdConfig};
use crate::pruning::{self, ImpConfig, ImpVariant, SparsityMask};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    /// `T`, the epoch every round trains up to.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub ood: &'a LabeledDataset,
    pub outliers: Option<OutlierExposure<'a>>,
}

#[derive(Debug)]
pub enum RoundEvent<'a> {
    /// `θ_k` was captured during round 0.
    RewindCaptured { params: &'a ParamSet },
    RoundStart {
        round: usize,
        mask: &'a SparsityMask,
        start_params: &'a ParamSet,
    },
    Epoch {
        round: usize,
        epoch: usize,
        params: &'a ParamSet,
        mask: &'a SparsityMask,
        loss: f64,
    },
    RoundEnd {
        round: usize,
        params: &'a ParamSet,
        mask: &'a SparsityMask,
    },
}

/// State needed to continue an IMP run after `next_round - 1` completed.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub next_round: usize,
    /// Mask the last completed round trained under.
    pub mask: SparsityMask,
    pub rewind: ParamSet,
    pub last_trained: ParamSet,
}

pub type Observer<'o> = dyn FnMut(RoundEvent<'_>) -> Result<()> + 'o;

#[allow(clippy::too_many_arguments)]
fn train_span(
    spec: &MlpSpec,
    params: &mut ParamSet,
    sgd: &SgdConfig,
    schedule: &TrainSchedule,
    data: &TrainData<'_>,
    mask: &SparsityMask,
    round: usize,
    first_epoch: usize,
    mut on_epoch: impl FnMut(usize, &ParamSet, f64) -> Result<()>,
    observer: &mut Observer<'_>,
) -> Result<()> {
    let mut velocity = params.zeros_like();
    let dense = mask.kept_count() == mask.prunable_count();
    let mask_arg = if dense { None } else { Some(mask) };
    for epoch in first_epoch..=schedule.epochs {
        let mut shuffle = rng::rng_from(schedule.seed, &[rng::TAG_SHUFFLE, round as u64, epoch as u64]);
        let loss = netcore::train_epoch(
            spec,
            params,
            &mut velocity,
            sgd,
            sgd.lr_at(epoch - 1),
            data.train,
            schedule.batch_size,
            &mut shuffle,
            mask_arg,
            data.outliers,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { batch, .. } => Error::NonFiniteLoss {
                epoch: Some(epoch),
                batch,
            },
            other => other,
        })?;
        observer(RoundEvent::Epoch {
            round,
            epoch,
            params,
            mask,
            loss,
        })?;
        on_epoch(epoch, params, loss)?;
    }
    Ok(())
}

/// Runs round 0 and, when `imp` is given, pruning rounds `1..=imp.rounds`.
/// `stop_after` ends the run once that round has finished.
#[allow(clippy::too_many_arguments)]
pub fn run_rounds(
    spec: &MlpSpec,
    init: &ParamSet,
    sgd: &SgdConfig,
    imp: Option<&ImpConfig>,
    schedule: &TrainSchedule,
    data: &TrainData<'_>,
    resume: Option<ResumeState>,
    stop_after: Option<usize>,
    observer: &mut Observer<'_>,
) -> Result<()> {
    init.check_matches(spec)?;
    if schedule.epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    if let Some(cfg) = imp {
        let problems = cfg.problems(schedule.epochs);
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
    }
    let total_rounds = imp.map_or(0, |c| c.rounds);

    let (mut mask, mut rewind, mut last_trained, first_round) = match resume {
        Some(state) => {
            if imp.is_none() {
                return Err(Error::InvalidArgument("resume requires an IMP configuration".into()));
            }
            state.rewind.check_matches(spec)?;
            state.last_trained.check_matches(spec)?;
            (
                state.mask,
                Some(state.rewind),
                state.last_trained,
                state.next_round,
            )
        }
        None => {
            let mask = SparsityMask::full(spec);
            let mut params = init.clone();
            let rewind_epoch = imp.map(|c| c.rewind_epoch);
            let mut rewind: Option<ParamSet> = None;
            if rewind_epoch == Some(0) {
                observer(RoundEvent::RewindCaptured { params: &params })?;
                rewind = Some(params.clone());
            }
            observer(RoundEvent::RoundStart {
                round: 0,
                mask: &mask,
                start_params: &params,
            })?;
            let mut captured: Option<ParamSet> = None;
            train_span(
                spec,
                &mut params,
                sgd,
                schedule,
                data,
                &mask,
                0,
                1,
                |epoch, p, _| {
                    if rewind_epoch == Some(epoch) {
                        captured = Some(p.clone());
                    }
                    Ok(())
                },
                observer,
            )?;
            if let Some(c) = captured {
                observer(RoundEvent::RewindCaptured { params: &c })?;
                rewind = Some(c);
            }
            observer(RoundEvent::RoundEnd {
                round: 0,
                params: &params,
                mask: &mask,
            })?;
            (mask, rewind, params, 1)
        }
    };

    if stop_after == Some(0) {
        return Ok(());
    }
    let Some(cfg) = imp else {
        return Ok(());
    };
    let rewind = rewind
        .take()
        .ok_or_else(|| Error::InvalidArgument("rewind weights were never captured".into()))?;

    for round in first_round..=total_rounds {
        mask = match cfg.variant {
            ImpVariant::Random => {
                let seed = rng::derive_seed(schedule.seed, &[rng::TAG_PRUNE, round as u64]);
                pruning::random_prune(&mask, cfg.prune_fraction, seed)?
            }
            ImpVariant::Rewind | ImpVariant::Finetune => {
                pruning::global_magnitude_prune(&last_trained, &mask, cfg.prune_fraction)?
            }
        };
        let start = match cfg.variant {
            ImpVariant::Rewind | ImpVariant::Random => pruning::apply_mask(&rewind, &mask)?,
            ImpVariant::Finetune => pruning::apply_mask(&last_trained, &mask)?,
        };
        observer(RoundEvent::RoundStart {
            round,
            mask: &mask,
            start_params: &start,
        })?;
        let mut params = start;
        train_span(
            spec,
            &mut params,
            sgd,
            schedule,
            data,
            &mask,
            round,
            cfg.rewind_epoch + 1,
            |_, _, _| Ok(()),
            observer,
        )?;
        observer(RoundEvent::RoundEnd {
            round,
            params: &params,
            mask: &mask,
        })?;
        last_trained = params;
        if stop_after == Some(round) {
            break;
        }
    }
    Ok(())
}

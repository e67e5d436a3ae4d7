//! Weight averaging of per-epoch checkpoints.
//!
//! For epochs up to `t0` the average simply mirrors the online weights. Past
//! `t0` each checkpoint is blended in as `avg ← τ·avg + (1−τ)·θ`. In
//! [`AveragingMode::RunningMean`] the blend factor is
//! `τ = (t−t0)/(t−t0+1)` for the `t−t0+1`-th absorbed checkpoint, which makes
//! `avg` the arithmetic mean of every checkpoint after `t0`.
//! [`AveragingMode::FixedEma`] uses a constant `τ` instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    #[default]
    RunningMean,
    FixedEma(f64),
}

#[derive(Debug, Clone)]
pub struct ModelAverager {
    t0: usize,
    mode: AveragingMode,
    count_since_start: usize,
    last_epoch: Option<usize>,
    avg: ParamSet,
}

impl ModelAverager {
    /// Starts from `init`, which is what [`snapshot`](Self::snapshot)
    /// returns until the first checkpoint arrives.
    pub fn new(t0: usize, mode: AveragingMode, init: &ParamSet) -> Result<Self> {
        if let AveragingMode::FixedEma(tau) = mode {
            if !(0.0..1.0).contains(&tau) {
                return Err(Error::InvalidArgument(format!(
                    "fixed EMA decay must lie in [0,1), got {tau}"
                )));
            }
        }
        Ok(Self {
            t0,
            mode,
            count_since_start: 0,
            last_epoch: None,
            avg: init.clone(),
        })
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn mode(&self) -> AveragingMode {
        self.mode
    }

    /// Checkpoints absorbed after `t0`.
    pub fn count_since_start(&self) -> usize {
        self.count_since_start
    }

    /// `true` once at least one post-`t0` checkpoint has been averaged in.
    pub fn is_averaging(&self) -> bool {
        self.count_since_start > 0
    }

    pub fn absorb(&mut self, epoch: usize, online: &ParamSet) -> Result<()> {
        if let Some(last) = self.last_epoch {
            if epoch <= last {
                return Err(Error::OutOfOrderEpoch { epoch, last });
            }
        }
        self.avg.ensure_same_shape(online, "ModelAverager::absorb")?;
        self.last_epoch = Some(epoch);
        if epoch <= self.t0 {
            self.avg.clone_from(online);
            self.count_since_start = 0;
            return Ok(());
        }
        let tau = match self.mode {
            // t − t0 checkpoints are already in the mean
            AveragingMode::RunningMean => {
                let k = self.count_since_start as f64;
                k / (k + 1.0)
            }
            AveragingMode::FixedEma(tau) => tau,
        };
        self.count_since_start += 1;
        blend(&mut self.avg, online, tau);
        Ok(())
    }

    pub fn snapshot(&self) -> ParamSet {
        self.avg.clone()
    }

    pub fn average(&self) -> &ParamSet {
        &self.avg
    }
}

fn blend(avg: &mut ParamSet, online: &ParamSet, tau: f64) {
    let one_minus = 1.0 - tau;
    for (a, o) in avg.layers.iter_mut().zip(&online.layers) {
        for (x, y) in a.weight.data_mut().iter_mut().zip(o.weight.data()) {
            *x = tau * *x + one_minus * y;
        }
        for (x, y) in a.bias.iter_mut().zip(&o.bias) {
            *x = tau * *x + one_minus * y;
        }
    }
}

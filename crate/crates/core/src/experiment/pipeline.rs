//! The prune → average → score pipeline, plus width sweeps and the
//! feature-difference analysis.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::averaging::ModelAverager;
use crate::checkpoint::Checkpoint;
use crate::datagen::{self, CsvOptions, LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::experiment::config::{DataConfig, ExperimentConfig};
use crate::experiment::runlog::{ModelKind, RunLog, RunRow};
use crate::metrics::{self, ConfidenceOutcomes, LabeledScores};
use crate::netcore::{self, MlpSpec, OutlierExposure, ParamSet};
use crate::pruning::SparsityMask;
use crate::scoring::{self, Scorer, ScorerConfig};
use crate::tensor::Tensor2;
use crate::training::{self, ResumeState, RoundEvent, TrainData, TrainSchedule};

pub const RUNLOG_FILE: &str = "runlog.csv";
pub const REWIND_FILE: &str = "rewind.ckpt";

pub fn round_checkpoint_name(round: usize) -> String {
    format!("round_{round:02}.ckpt")
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub ood: LabeledDataset,
    pub outliers: Option<Tensor2>,
    pub ood_name: String,
}

pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(vec!["[data] section is required".into()]))?;
    let (train, test, ood, ood_name) = match data {
        DataConfig::Blob(b) => {
            let spec = b.task_spec(cfg.seed);
            let t = datagen::make_blob_task(&spec, b.n_train, b.n_test, b.n_ood)?;
            (t.train, t.test, t.ood, "blob_ood".to_string())
        }
        DataConfig::Csv(c) => {
            let opts = |p| CsvOptions {
                has_header: c.has_header,
                labeled_as: p,
            };
            let train = datagen::load_csv(&c.train, opts(Provenance::IdTrain))?;
            let test = datagen::load_csv(&c.test, opts(Provenance::IdTest))?;
            let ood = datagen::load_csv(&c.ood, opts(Provenance::IdTest))?;
            if ood.provenance != Provenance::Ood {
                return Err(Error::InvalidArgument(format!(
                    "{}: OOD file must carry label -1 on every row",
                    c.ood.display()
                )));
            }
            let name = c
                .ood
                .file_stem()
                .map_or("ood".to_string(), |s| s.to_string_lossy().replace(',', "_"));
            (train, test, ood, name)
        }
    };
    let outliers = match &cfg.oe {
        None => None,
        Some(oe) => match (&oe.path, oe.n_outliers, data) {
            (Some(path), _, _) => {
                let opts = CsvOptions {
                    has_header: true,
                    labeled_as: Provenance::IdTrain,
                };
                Some(datagen::load_csv(path, opts)?.inputs)
            }
            (None, Some(n), DataConfig::Blob(b)) => {
                Some(datagen::make_outliers(&b.task_spec(cfg.seed), n)?.inputs)
            }
            _ => return Err(Error::InvalidConfig(vec!["oe needs n_outliers (blob) or path".into()])),
        },
    };
    Ok(Datasets {
        train,
        test,
        ood,
        outliers,
        ood_name,
    })
}

/// Final weights of one round.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: usize,
    pub mask: SparsityMask,
    pub online: ParamSet,
    pub averaged: Option<ParamSet>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec: MlpSpec,
    pub log: RunLog,
    pub rounds: Vec<RoundResult>,
}

impl RunOutcome {
    /// The pipeline's output model: the averaged weights of the last round
    /// when averaging ran, else its online weights.
    pub fn final_model(&self) -> Option<&ParamSet> {
        self.rounds
            .last()
            .map(|r| r.averaged.as_ref().unwrap_or(&r.online))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where checkpoints and the run log go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Stop once this round has finished.
    pub stop_after: Option<usize>,
    /// Continue from the artifacts in `out_dir`.
    pub resume: bool,
}

/// Context shared by every evaluation of one run.
pub struct EvalContext<'a> {
    pub spec: &'a MlpSpec,
    pub data: &'a Datasets,
    pub scorers: &'a [Scorer],
    pub scorer_config: &'a ScorerConfig,
}

fn error_rate(pred: &[usize], labels: &[usize]) -> f64 {
    let wrong = pred.iter().zip(labels).filter(|(p, y)| p != y).count();
    wrong as f64 / labels.len().max(1) as f64
}

/// One row per scorer for the given weights.
pub fn evaluate_model(
    ctx: &EvalContext<'_>,
    params: &ParamSet,
    round: usize,
    epoch: usize,
    sparsity: f64,
    model: ModelKind,
) -> Result<Vec<RunRow>> {
    let spec = ctx.spec;
    let train_labels = ctx.data.train.labels.as_deref().expect("training data is labeled");
    let test_labels = ctx.data.test.labels.as_deref().expect("test data is labeled");
    let train_trace = netcore::forward(spec, params, &ctx.data.train.inputs)?;
    let test_trace = netcore::forward(spec, params, &ctx.data.test.inputs)?;
    let ood_trace = netcore::forward(spec, params, &ctx.data.ood.inputs)?;
    let train_err = error_rate(&netcore::argmax_rows(train_trace.logits()), train_labels);
    let test_pred = netcore::argmax_rows(test_trace.logits());
    let test_err = error_rate(&test_pred, test_labels);
    let correct: Vec<bool> = test_pred.iter().zip(test_labels).map(|(p, y)| p == y).collect();

    let bank = if ctx.scorers.iter().any(|s| s.needs_bank()) {
        Some(scoring::fit_bank_from_features(
            train_trace.features(),
            train_labels,
            spec.num_classes,
            ctx.scorer_config.react_percentile,
        )?)
    } else {
        None
    };
    let cfg = ctx.scorer_config;
    let mut rows = Vec::with_capacity(ctx.scorers.len());
    for &scorer in ctx.scorers {
        let (s_id, s_ood) = match scorer {
            Scorer::Msp => (scoring::score_msp(&test_trace), scoring::score_msp(&ood_trace)),
            Scorer::MaxLogit => (
                scoring::score_maxlogit(&test_trace),
                scoring::score_maxlogit(&ood_trace),
            ),
            Scorer::Energy => (
                scoring::score_energy(&test_trace, cfg.energy_temperature),
                scoring::score_energy(&ood_trace, cfg.energy_temperature),
            ),
            _ => (
                scoring::score_batch(scorer, spec, params, bank.as_ref(), &ctx.data.test.inputs, cfg)?,
                scoring::score_batch(scorer, spec, params, bank.as_ref(), &ctx.data.ood.inputs, cfg)?,
            ),
        };
        let ls = LabeledScores::new(s_id.clone(), s_ood);
        let co = ConfidenceOutcomes::new(s_id, correct.clone())?;
        let aupr_err = match metrics::aupr_err(&co) {
            Ok(v) => v,
            Err(Error::NoPositives(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        rows.push(RunRow {
            round,
            epoch,
            sparsity,
            model,
            scorer,
            ood_set: ctx.data.ood_name.clone(),
            train_err,
            test_err,
            auroc: metrics::auroc(&ls)?,
            aupr: metrics::aupr(&ls)?,
            fpr95: metrics::fpr95(&ls)?,
            aurc: metrics::aurc(&co)?,
            e_aurc: metrics::e_aurc(&co)?,
            aupr_err,
        });
    }
    Ok(rows)
}

fn save_round(dir: &Path, seed: u64, epoch: usize, spec: &MlpSpec, r: &RoundResult, masked: bool) -> Result<()> {
    Checkpoint {
        spec: spec.clone(),
        seed,
        epoch: epoch as u64,
        params: r.online.clone(),
        mask: masked.then(|| r.mask.clone()),
        ema: r.averaged.clone(),
    }
    .save(dir.join(round_checkpoint_name(r.round)))
}

struct Resumed {
    state: Option<ResumeState>,
    log: RunLog,
    rounds: Vec<RoundResult>,
}

fn load_resume(cfg: &ExperimentConfig, spec: &MlpSpec, dir: &Path) -> Result<Resumed> {
    let mut last = None;
    let mut rounds = Vec::new();
    let max_round = cfg.imp.as_ref().map_or(0, |c| c.rounds);
    for round in 0..=max_round {
        let path = dir.join(round_checkpoint_name(round));
        if !path.exists() {
            break;
        }
        let ck = Checkpoint::load(&path)?;
        if &ck.spec != spec {
            return Err(Error::Checkpoint(format!("{} was written for a different network", path.display())));
        }
        let mask = ck.mask.clone().unwrap_or_else(|| SparsityMask::full(spec));
        rounds.push(RoundResult {
            round,
            mask,
            online: ck.params,
            averaged: ck.ema,
        });
        last = Some(round);
    }
    let Some(last) = last else {
        return Ok(Resumed {
            state: None,
            log: RunLog::default(),
            rounds: Vec::new(),
        });
    };
    let mut log = RunLog::load(dir.join(RUNLOG_FILE))?;
    log.rows.retain(|r| r.round <= last);
    if cfg.imp.is_none() || last == max_round {
        return Ok(Resumed {
            state: None,
            log,
            rounds,
        });
    }
    let rewind_path = dir.join(REWIND_FILE);
    if !rewind_path.exists() {
        return Err(Error::MissingRewind(rewind_path));
    }
    let rewind = Checkpoint::load(&rewind_path)?.params;
    let done = rounds.last().expect("at least one round");
    Ok(Resumed {
        state: Some(ResumeState {
            next_round: last + 1,
            mask: done.mask.clone(),
            rewind,
            last_trained: done.online.clone(),
        }),
        log,
        rounds,
    })
}

/// Runs dense training or IMP, keeps a weight average inside every round,
/// evaluates every configured scorer every `eval_every` epochs (and at the
/// last epoch), and persists checkpoints and the run log when an output
/// directory is given.
pub fn run_aop(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate_for_training()?;
    let spec = cfg.net.clone().expect("validated");
    let data = build_datasets(cfg)?;
    if data.train.dim() != spec.input_dim {
        return Err(Error::shape(
            "training data",
            format!("{} features, net.input_dim is {}", data.train.dim(), spec.input_dim),
        ));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (resume_state, mut log, mut rounds) = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => {
            let r = load_resume(cfg, &spec, dir)?;
            let finished = r.state.is_none() && !r.rounds.is_empty();
            if finished {
                return Ok(RunOutcome {
                    spec,
                    log: r.log,
                    rounds: r.rounds,
                });
            }
            (r.state, r.log, r.rounds)
        }
        (None, true) => return Err(Error::InvalidArgument("resume needs an output directory".into())),
        _ => (None, RunLog::default(), Vec::new()),
    };

    let schedule = TrainSchedule {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let oe = match (&cfg.oe, &data.outliers) {
        (Some(o), Some(x)) => Some(OutlierExposure {
            outliers: x,
            weight: o.weight,
        }),
        _ => None,
    };
    let train_data = TrainData {
        train: &data.train,
        test: &data.test,
        ood: &data.ood,
        outliers: oe,
    };
    let ctx = EvalContext {
        spec: &spec,
        data: &data,
        scorers: &cfg.scorers,
        scorer_config: &cfg.scorer_config,
    };
    let init = ParamSet::init(&spec, cfg.seed);
    let t0 = cfg.t0();
    let masked = cfg.imp.is_some();
    let out_dir = opts.out_dir.as_deref();

    let mut averager: Option<ModelAverager> = None;
    let mut sparsity = 0.0;
    let mut observer = |ev: RoundEvent<'_>| -> Result<()> {
        match ev {
            RoundEvent::RewindCaptured { params } => {
                if let Some(dir) = out_dir {
                    Checkpoint {
                        spec: spec.clone(),
                        seed: cfg.seed,
                        epoch: cfg.imp.as_ref().map_or(0, |c| c.rewind_epoch) as u64,
                        params: params.clone(),
                        mask: None,
                        ema: None,
                    }
                    .save(dir.join(REWIND_FILE))?;
                }
            }
            RoundEvent::RoundStart {
                mask, start_params, ..
            } => {
                sparsity = mask.sparsity();
                averager = if cfg.averaging.enabled {
                    Some(ModelAverager::new(t0, cfg.averaging.mode, start_params)?)
                } else {
                    None
                };
            }
            RoundEvent::Epoch {
                round,
                epoch,
                params,
                ..
            } => {
                if let Some(a) = averager.as_mut() {
                    a.absorb(epoch, params)?;
                }
                if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                    log.rows
                        .extend(evaluate_model(&ctx, params, round, epoch, sparsity, ModelKind::Online)?);
                    if let Some(a) = averager.as_ref().filter(|a| a.is_averaging()) {
                        log.rows.extend(evaluate_model(
                            &ctx,
                            a.average(),
                            round,
                            epoch,
                            sparsity,
                            ModelKind::Averaged,
                        )?);
                    }
                }
            }
            RoundEvent::RoundEnd { round, params, mask } => {
                let result = RoundResult {
                    round,
                    mask: mask.clone(),
                    online: params.clone(),
                    averaged: averager
                        .as_ref()
                        .filter(|a| a.is_averaging())
                        .map(|a| a.snapshot()),
                };
                if let Some(dir) = out_dir {
                    save_round(dir, cfg.seed, cfg.epochs, &spec, &result, masked)?;
                    log.write(dir.join(RUNLOG_FILE))?;
                }
                rounds.push(result);
            }
        }
        Ok(())
    };
    training::run_rounds(
        &spec,
        &init,
        &cfg.sgd,
        cfg.imp.as_ref(),
        &schedule,
        &train_data,
        resume_state,
        opts.stop_after,
        &mut observer,
    )?;
    Ok(RunOutcome { spec, log, rounds })
}

/// Worker count for sweeps: `AOP_LAB_THREADS` if set, else the number of
/// available cores.
pub fn sweep_threads() -> usize {
    std::env::var("AOP_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on up to `threads` scoped workers, returning results in job
/// order.
pub fn parallel_map<T, R, F>(jobs: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WidthRow {
    pub width: usize,
    pub test_acc: f64,
    pub final_auroc: f64,
}

pub const WIDTH_HEADER: &str = "width,test_acc,final_auroc";

/// One full run per width (every hidden layer set to that width). AUROC is
/// the first configured scorer's, on the pipeline's output model.
pub fn width_sweep(cfg: &ExperimentConfig, widths: &[usize], threads: usize) -> Result<Vec<WidthRow>> {
    cfg.validate_for_training()?;
    let results = parallel_map(widths, threads, |&w| -> Result<WidthRow> {
        let mut c = cfg.clone();
        let net = c.net.as_mut().expect("validated");
        if net.hidden_widths.is_empty() {
            net.hidden_widths = vec![w];
        } else {
            net.hidden_widths.iter_mut().for_each(|h| *h = w);
        }
        let out = run_aop(&c, &RunOptions::default())?;
        let last = out.log.last_round().unwrap_or(0);
        let want_model = if out.rounds.last().is_some_and(|r| r.averaged.is_some()) {
            ModelKind::Averaged
        } else {
            ModelKind::Online
        };
        let row = out
            .log
            .final_rows(last)
            .into_iter()
            .find(|r| r.model == want_model && r.scorer == cfg.scorers[0])
            .ok_or_else(|| Error::Empty("run produced no evaluation rows".into()))?;
        Ok(WidthRow {
            width: w,
            test_acc: 1.0 - row.test_err,
            final_auroc: row.auroc,
        })
    });
    results.into_iter().collect()
}

pub fn width_csv(rows: &[WidthRow]) -> String {
    let mut s = format!("{WIDTH_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:?},{:?}\n", r.width, r.test_acc, r.final_auroc));
    }
    s
}

/// Width with the highest AUROC (first on ties).
pub fn auroc_argmax(rows: &[WidthRow]) -> Option<usize> {
    rows.iter()
        .fold(None::<&WidthRow>, |best, r| match best {
            Some(b) if b.final_auroc >= r.final_auroc => Some(b),
            _ => Some(r),
        })
        .map(|r| r.width)
}

/// `|mean ID feature − mean OOD feature|` per coordinate, for a dense and a
/// sparse model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDiff {
    /// `1 × feature_dim`.
    pub dense: Tensor2,
    pub sparse: Tensor2,
}

impl FeatureDiff {
    pub fn l1_dense(&self) -> f64 {
        self.dense.data().iter().sum()
    }

    pub fn l1_sparse(&self) -> f64 {
        self.sparse.data().iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let f = self.dense.cols();
        let mut s = String::from("model");
        (0..f).for_each(|i| s.push_str(&format!(",f{i}")));
        s.push('\n');
        for (name, t) in [("dense", &self.dense), ("sparse", &self.sparse)] {
            s.push_str(name);
            t.data().iter().for_each(|v| s.push_str(&format!(",{v:?}")));
            s.push('\n');
        }
        s
    }
}

fn mean_feature_gap(spec: &MlpSpec, params: &ParamSet, id: &Tensor2, ood: &Tensor2) -> Result<Tensor2> {
    let mean = |x: &Tensor2| -> Result<Vec<f64>> {
        let t = netcore::forward(spec, params, x)?;
        let f = t.features();
        let mut m = vec![0.0; f.cols()];
        for row in f.row_iter() {
            m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let n = f.rows() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        Ok(m)
    };
    let a = mean(id)?;
    let b = mean(ood)?;
    Tensor2::from_vec(1, a.len(), a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect())
}

pub fn feature_diff_report(
    spec: &MlpSpec,
    dense: &ParamSet,
    sparse: &ParamSet,
    id_batch: &Tensor2,
    ood_batch: &Tensor2,
) -> Result<FeatureDiff> {
    if id_batch.rows() == 0 || ood_batch.rows() == 0 {
        return Err(Error::Empty("feature difference needs non-empty batches".into()));
    }
    if id_batch.rows() < 8 || ood_batch.rows() < 8 {
        log::warn!("feature difference from fewer than 8 samples per side is noisy");
    }
    Ok(FeatureDiff {
        dense: mean_feature_gap(spec, dense, id_batch, ood_batch)?,
        sparse: mean_feature_gap(spec, sparse, id_batch, ood_batch)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let jobs: Vec<usize> = (0..17).collect();
        for t in [1, 3, 8] {
            assert_eq!(parallel_map(&jobs, t, |x| x * x), jobs.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(parallel_map(&[] as &[usize], 4, |x| *x).is_empty());
    }

    #[test]
    fn feature_diff_identical_batches_is_zero() {
        let spec = MlpSpec::new(3, vec![5], 2);
        let p = ParamSet::init(&spec, 1);
        let x = Tensor2::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let d = feature_diff_report(&spec, &p, &p, &x, &x).unwrap();
        assert_eq!((d.dense.rows(), d.dense.cols()), (1, 5));
        assert!(d.dense.data().iter().chain(d.sparse.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn argmax_first_on_ties() {
        let rows = [
            WidthRow { width: 1, test_acc: 0.5, final_auroc: 0.7 },
            WidthRow { width: 4, test_acc: 0.9, final_auroc: 0.8 },
            WidthRow { width: 16, test_acc: 0.9, final_auroc: 0.8 },
        ];
        assert_eq!(auroc_argmax(&rows), Some(4));
    }
}

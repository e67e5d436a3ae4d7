use std::path::Path;

use aop_lab::checkpoint::Checkpoint;
use aop_lab::experiment::pipeline::{self, RunOptions, REWIND_FILE, RUNLOG_FILE};
use aop_lab::experiment::report::{self, CURVES_HEADER, METRICS_HEADER};
use aop_lab::experiment::tasks::{self, LANDSCAPE_FILE, LANDSCAPE_ONLINE_FILE};
use aop_lab::experiment::{run_aop, ExperimentConfig, ModelKind, RunLog};
use aop_lab::landscape::LANDSCAPE_HEADER;
use aop_lab::Error;

const QUICK: &str = include_str!("../../../configs/quick.toml");

fn quick() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(QUICK).unwrap()
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = quick();
    let full = tempfile::tempdir().unwrap();
    let whole = run_aop(&cfg, &opts(full.path())).unwrap();

    let part = tempfile::tempdir().unwrap();
    let first = run_aop(
        &cfg,
        &RunOptions {
            stop_after: Some(0),
            ..opts(part.path())
        },
    )
    .unwrap();
    assert_eq!(first.rounds.len(), 1);
    let resumed = run_aop(
        &cfg,
        &RunOptions {
            resume: true,
            ..opts(part.path())
        },
    )
    .unwrap();

    let a = std::fs::read(full.path().join(RUNLOG_FILE)).unwrap();
    let b = std::fs::read(part.path().join(RUNLOG_FILE)).unwrap();
    assert_eq!(a, b);
    assert_eq!(whole.log, resumed.log);
    for (x, y) in whole.rounds.iter().zip(&resumed.rounds) {
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.online, y.online);
        assert_eq!(x.averaged, y.averaged);
    }
    let last = pipeline::round_checkpoint_name(whole.rounds.len() - 1);
    assert_eq!(
        std::fs::read(full.path().join(&last)).unwrap(),
        std::fs::read(part.path().join(&last)).unwrap()
    );
}

#[test]
fn resume_without_rewind_checkpoint_is_an_error() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    run_aop(
        &cfg,
        &RunOptions {
            stop_after: Some(0),
            ..opts(dir.path())
        },
    )
    .unwrap();
    std::fs::remove_file(dir.path().join(REWIND_FILE)).unwrap();
    let err = run_aop(
        &cfg,
        &RunOptions {
            resume: true,
            ..opts(dir.path())
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::MissingRewind(_)), "{err}");
}

#[test]
fn evaluation_rows_pair_online_and_average_after_t0() {
    let cfg = quick();
    let out = run_aop(&cfg, &RunOptions::default()).unwrap();
    let t0 = cfg.t0();
    let rounds = out.log.last_round().unwrap() + 1;
    assert_eq!(rounds, 3);
    for round in 0..rounds {
        for &s in &cfg.scorers {
            let on = out.log.auroc_series(round, ModelKind::Online, s);
            let ma = out.log.auroc_series(round, ModelKind::Averaged, s);
            let after: Vec<usize> = on.iter().map(|x| x.0).filter(|&e| e > t0).collect();
            assert!(!after.is_empty());
            assert_eq!(ma.iter().map(|x| x.0).collect::<Vec<_>>(), after);
        }
    }
    // sparsity grows round over round
    let sparsity: Vec<f64> = (0..rounds).map(|r| out.log.final_rows(r)[0].sparsity).collect();
    assert_eq!(sparsity[0], 0.0);
    assert!(sparsity.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn reports_are_well_formed() {
    let cfg = quick();
    let out = run_aop(&cfg, &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report::emit_report(&out.log, dir.path()).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(metrics.lines().count(), 1 + cfg.scorers.len());
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), CURVES_HEADER);
    for name in ["auroc_vs_epoch.svg", "auroc_vs_sparsity.svg"] {
        let svg = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(doc.descendants().any(|n| n.has_tag_name("polyline")));
    }
    // the run log on disk parses back to the same rows
    let run_dir = tempfile::tempdir().unwrap();
    let again = run_aop(&cfg, &opts(run_dir.path())).unwrap();
    assert_eq!(RunLog::load(run_dir.path().join(RUNLOG_FILE)).unwrap().to_csv_string(), again.log.to_csv_string());
}

#[test]
fn checkpoint_evaluation_and_landscape() {
    let mut cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let out = run_aop(&cfg, &opts(dir.path())).unwrap();
    let ck_path = dir.path().join(pipeline::round_checkpoint_name(out.rounds.len() - 1));
    let ck = Checkpoint::load(&ck_path).unwrap();
    let eval = tasks::evaluate_checkpoint(&cfg, &ck).unwrap();
    assert_eq!(eval.metrics.len(), cfg.scorers.len());
    // same numbers the pipeline logged for the averaged model at the last epoch
    let last = out.log.last_round().unwrap();
    for (m, s) in eval.metrics.iter().zip(&cfg.scorers) {
        let row = out
            .log
            .final_rows(last)
            .into_iter()
            .find(|r| r.model == ModelKind::Averaged && r.scorer == *s)
            .unwrap();
        assert_eq!(m.auroc, row.auroc, "{s}");
    }

    cfg.landscape.checkpoint = Some(ck_path);
    let land = tempfile::tempdir().unwrap();
    let scans = tasks::run_landscape(&cfg, Some(land.path())).unwrap();
    assert_eq!(scans.online.len(), cfg.landscape.directions);
    for name in [LANDSCAPE_FILE, LANDSCAPE_ONLINE_FILE] {
        let text = std::fs::read_to_string(land.path().join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), LANDSCAPE_HEADER);
        assert_eq!(text.lines().count(), 1 + 21 * cfg.landscape.directions);
    }
    // α = 0 reproduces the unperturbed checkpoint
    let zero = scans.online[0].1.iter().find(|r| r.alpha == 0.0).unwrap();
    let base = out.log.final_rows(last).into_iter().find(|r| r.model == ModelKind::Online && r.scorer == cfg.landscape.scorer).unwrap();
    assert_eq!(zero.auroc, base.auroc);
}

#[test]
fn width_sweep_is_independent_of_thread_count() {
    let mut cfg = quick();
    cfg.imp = None;
    cfg.epochs = 4;
    cfg.averaging.t0 = Some(2);
    cfg.sgd.lr_schedule.clear();
    let widths = [4, 8, 16];
    let one = pipeline::width_sweep(&cfg, &widths, 1).unwrap();
    let three = pipeline::width_sweep(&cfg, &widths, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.iter().map(|r| r.width).collect::<Vec<_>>(), widths);
    assert!(pipeline::width_csv(&one).starts_with(pipeline::WIDTH_HEADER));
}

#[test]
fn invalid_configs_list_every_problem() {
    let text = QUICK.replace("learning_rate = 0.05", "learning_rate = -1.0").replace("t0 = 6", "t0 = 60");
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    match run_aop(&cfg, &RunOptions::default()) {
        Err(Error::InvalidConfig(p)) => assert!(p.len() >= 2, "{p:?}"),
        other => panic!("expected InvalidConfig, got {other:?}"),
    }
    assert!(ExperimentConfig::from_toml_str(&format!("{QUICK}\nbogus = 1\n")).is_err());
}

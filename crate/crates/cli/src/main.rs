use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aop_lab::checkpoint::Checkpoint;
use aop_lab::experiment::pipeline::{self, RunOptions, RUNLOG_FILE};
use aop_lab::experiment::report;
use aop_lab::experiment::tasks;
use aop_lab::experiment::{run_aop, ExperimentConfig, RunLog, RunOutcome};
use aop_lab::theory;
use aop_lab::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aop-lab", version, about = "Averaging and pruning experiments for OOD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Dense training with weight averaging (any `[imp]` section is ignored).
    Train(Common),
    /// Iterative magnitude pruning with rewinding, averaging inside each round.
    Imp {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score the newest round checkpoint in the output directory.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score instead of the newest round checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gaussian-model risk sweeps over d and λ.
    Theory(Common),
    /// AUROC/FPR95 along random weight directions.
    Landscape(Common),
    /// One run per hidden width; `AOP_LAB_THREADS` caps parallel runs.
    WidthSweep(Common),
    /// Tables and plots from the run log in the output directory.
    Report(Common),
}

fn load(common: &Common) -> aop_lab::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn write(dir: &Path, name: &str, text: &str) -> aop_lab::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    theory::write_text(&dir.join(name), text)
}

fn summarize(out: &RunOutcome) {
    for row in report::metrics_from_runlog(&out.log) {
        println!(
            "{:<9} auroc {:.4}  fpr95 {:.4}  aupr {:.4}  acc {:.4}",
            row.scorer, row.auroc, row.fpr95, row.aupr, row.acc
        );
    }
}

fn train(common: &Common, imp: bool, resume: bool) -> aop_lab::Result<()> {
    let (mut cfg, out) = load(common)?;
    if imp {
        if cfg.imp.is_none() {
            return Err(Error::InvalidConfig(vec!["the imp subcommand needs an [imp] section".into()]));
        }
    } else {
        cfg.imp = None;
    }
    let outcome = run_aop(
        &cfg,
        &RunOptions {
            out_dir: Some(out.clone()),
            stop_after: None,
            resume,
        },
    )?;
    report::emit_report(&outcome.log, &out)?;
    summarize(&outcome);
    println!("wrote {}", out.display());
    Ok(())
}

/// Highest-numbered `round_NN.ckpt` in `dir`.
fn newest_round_checkpoint(dir: &Path) -> aop_lab::Result<PathBuf> {
    (0..1000)
        .map(|r| dir.join(pipeline::round_checkpoint_name(r)))
        .take_while(|p| p.exists())
        .last()
        .ok_or_else(|| Error::Empty(format!("no round checkpoints in {}", dir.display())))
}

fn eval(common: &Common, checkpoint: Option<&Path>) -> aop_lab::Result<()> {
    let (cfg, out) = load(common)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => newest_round_checkpoint(&out)?,
    };
    let ck = Checkpoint::load(&path)?;
    let result = tasks::evaluate_checkpoint(&cfg, &ck)?;
    write(&out, "metrics.csv", &report::metrics_csv(&result.metrics))?;
    write(&out, "predictions.csv", &report::predictions_csv(&result.labels, &result.predictions))?;
    for (s, scores) in cfg.scorers.iter().zip(&result.scores) {
        write(&out, &format!("scores_{s}.csv"), &report::scores_csv(scores))?;
    }
    for row in &result.metrics {
        println!("{:<9} auroc {:.4}  fpr95 {:.4}  aupr {:.4}", row.scorer, row.auroc, row.fpr95, row.aupr);
    }
    println!("scored {} into {}", path.display(), out.display());
    Ok(())
}

fn run_theory(common: &Common) -> aop_lab::Result<()> {
    let (cfg, out) = load(common)?;
    let problems = cfg.theory_problems();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let t = tasks::emit_theory(&cfg.theory, &out)?;
    println!("{} d-sweep rows, {} λ-sweep rows", t.d_sweep.len(), t.lambda_sweep.len());
    if let Some(l) = theory::balanced_lambda(&t.lambda_sweep) {
        println!("λ minimizing r_id + r_ood at d={}: {l}", cfg.theory.lambda_d);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_landscape(common: &Common) -> aop_lab::Result<()> {
    let (cfg, out) = load(common)?;
    let scans = tasks::run_landscape(&cfg, Some(&out))?;
    let s = cfg.landscape.scale;
    let show = |name: &str, scan: &[tasks::Scan]| {
        if let Some(r) = tasks::median_auroc_range(scan, -s, s) {
            println!("{name:<7} median AUROC range over α ∈ [{}, {s}]: {r:.4}", -s);
        }
    };
    show("online", &scans.online);
    if let Some(avg) = &scans.averaged {
        show("average", avg);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run_width_sweep(common: &Common) -> aop_lab::Result<()> {
    let (cfg, out) = load(common)?;
    let widths = cfg
        .width_sweep
        .as_ref()
        .map(|w| w.widths.clone())
        .filter(|w| !w.is_empty())
        .ok_or_else(|| Error::InvalidConfig(vec!["width-sweep needs [width_sweep] widths".into()]))?;
    let threads = pipeline::sweep_threads();
    log::info!("sweeping {} widths on {threads} threads", widths.len());
    let rows = pipeline::width_sweep(&cfg, &widths, threads)?;
    write(&out, "width_sweep.csv", &pipeline::width_csv(&rows))?;
    for r in &rows {
        println!("width {:>5}  acc {:.4}  auroc {:.4}", r.width, r.test_acc, r.final_auroc);
    }
    if let Some(w) = pipeline::auroc_argmax(&rows) {
        println!("best AUROC at width {w}");
    }
    Ok(())
}

fn run_report(common: &Common) -> aop_lab::Result<()> {
    let (_, out) = load(common)?;
    let log = RunLog::load(out.join(RUNLOG_FILE))?;
    report::emit_report(&log, &out)?;
    println!("wrote report into {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c, false, false),
        Command::Imp { common, resume } => train(common, true, *resume),
        Command::Eval { common, checkpoint } => eval(common, checkpoint.as_deref()),
        Command::Theory(c) => run_theory(c),
        Command::Landscape(c) => run_landscape(c),
        Command::WidthSweep(c) => run_width_sweep(c),
        Command::Report(c) => run_report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::InvalidConfig(problems)) => {
            eprintln!("error: invalid configuration");
            for p in problems {
                eprintln!("  - {p}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

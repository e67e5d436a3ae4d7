//! Versioned TOML description of one experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::averaging::AveragingMode;
use crate::datagen::BlobTaskSpec;
use crate::error::{Error, Result};
use crate::landscape::DirectionNormalization;
use crate::netcore::{MlpSpec, SgdConfig};
use crate::pruning::ImpConfig;
use crate::scoring::{Scorer, ScorerConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_scorers")]
    pub scorers: Vec<Scorer>,
    /// Required by every subcommand that trains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net: Option<MlpSpec>,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub averaging: AveragingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imp: Option<ImpConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oe: Option<OeConfig>,
    #[serde(default)]
    pub scorer_config: ScorerConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(default)]
    pub landscape: LandscapeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_sweep: Option<WidthSweepConfig>,
}

fn default_epochs() -> usize {
    200
}

fn default_batch() -> usize {
    64
}

fn one() -> usize {
    1
}

fn default_scorers() -> Vec<Scorer> {
    vec![Scorer::Msp]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AveragingConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Defaults to half the epoch budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<usize>,
    #[serde(default)]
    pub mode: AveragingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Blob(BlobData),
    Csv(CsvData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobData {
    pub num_classes: usize,
    pub special_dims: usize,
    pub common_dims: usize,
    pub class_separation: f64,
    pub common_mean: f64,
    pub noise_sigma: f64,
    /// Data seed; the run seed is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
}

impl BlobData {
    pub fn task_spec(&self, run_seed: u64) -> BlobTaskSpec {
        BlobTaskSpec {
            num_classes: self.num_classes,
            special_dims: self.special_dims,
            common_dims: self.common_dims,
            class_separation: self.class_separation,
            common_mean: self.common_mean,
            noise_sigma: self.noise_sigma,
            seed: self.seed.unwrap_or(run_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub train: PathBuf,
    pub test: PathBuf,
    pub ood: PathBuf,
    #[serde(default = "yes")]
    pub has_header: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OeConfig {
    pub weight: f64,
    /// Outliers drawn from the blob generator (blob data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_outliers: Option<usize>,
    /// CSV of unlabeled outliers (`-1` labels).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub eta: f64,
    pub sigma: f64,
    pub d_values: Vec<usize>,
    pub delta_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub lambda_d: usize,
    pub lambda_delta: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            sigma: 1.0,
            d_values: (0..=100).map(|i| i * 1000).collect(),
            delta_values: vec![1.0, 2.0, 3.0],
            lambda_values: (0..100).map(|i| i as f64 * 0.01).collect(),
            lambda_d: 50_000,
            lambda_delta: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub directions: usize,
    /// Half-width of the α grid.
    pub scale: f64,
    pub normalization: DirectionNormalization,
    pub scorer: Scorer,
    /// Scan this checkpoint (and its averaged weights, if stored) instead of
    /// training first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            directions: 10,
            scale: 1.0,
            normalization: DirectionNormalization::PerUnitFilterwise,
            scorer: Scorer::Msp,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSweepConfig {
    pub widths: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative data paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(DataConfig::Csv(c)) = &mut self.data {
            fix(&mut c.train);
            fix(&mut c.test);
            fix(&mut c.ood);
        }
        if let Some(p) = self.oe.as_mut().and_then(|o| o.path.as_mut()) {
            fix(p);
        }
        if let Some(p) = self.landscape.checkpoint.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("cannot serialize config: {e}")))
    }

    pub fn t0(&self) -> usize {
        self.averaging.t0.unwrap_or(self.epochs / 2)
    }

    /// Every problem with the theory settings.
    pub fn theory_problems(&self) -> Vec<String> {
        let t = &self.theory;
        let mut p = Vec::new();
        if !(t.sigma > 0.0) {
            p.push("theory.sigma must be > 0".into());
        }
        if !(t.eta >= 0.0) {
            p.push("theory.eta must be >= 0".into());
        }
        if t.d_values.is_empty() || t.delta_values.is_empty() || t.lambda_values.is_empty() {
            p.push("theory sweeps need at least one value each".into());
        }
        if t.delta_values.iter().chain([&t.lambda_delta]).any(|v| !(*v >= 0.0)) {
            p.push("theory deltas must be >= 0".into());
        }
        if t.lambda_values.iter().any(|v| !(*v >= 0.0 && *v < 1.0)) {
            p.push("theory.lambda_values must lie in [0,1)".into());
        }
        p
    }

    /// Every problem that prevents a training run, listed together.
    pub fn training_problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            p.push(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.epochs == 0 {
            p.push("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            p.push("eval_every must be >= 1".into());
        }
        if self.scorers.is_empty() {
            p.push("scorers must list at least one scorer".into());
        }
        p.extend(self.sgd.problems());
        p.extend(self.scorer_config.problems());
        match &self.net {
            None => p.push("[net] section is required".into()),
            Some(net) => match net.validate() {
                Err(Error::InvalidConfig(v)) => p.extend(v),
                Err(e) => p.push(e.to_string()),
                Ok(()) => {}
            },
        }
        if self.averaging.enabled {
            if self.t0() >= self.epochs {
                p.push(format!("averaging.t0 ({}) must be smaller than epochs ({})", self.t0(), self.epochs));
            }
            if let AveragingMode::FixedEma(tau) = self.averaging.mode {
                if !(0.0..1.0).contains(&tau) {
                    p.push(format!("averaging.mode fixed_ema decay must lie in [0,1), got {tau}"));
                }
            }
        }
        if let Some(imp) = &self.imp {
            p.extend(imp.problems(self.epochs));
        }
        match &self.data {
            None => p.push("[data] section is required".into()),
            Some(DataConfig::Blob(b)) => {
                p.extend(b.task_spec(self.seed).problems());
                for (name, n) in [("n_train", b.n_train), ("n_test", b.n_test), ("n_ood", b.n_ood)] {
                    if n < b.num_classes {
                        p.push(format!("data.blob.{name} ({n}) must be >= num_classes ({})", b.num_classes));
                    }
                }
                if let Some(net) = &self.net {
                    if net.input_dim != b.special_dims + b.common_dims {
                        p.push(format!(
                            "net.input_dim ({}) must equal special_dims + common_dims ({})",
                            net.input_dim,
                            b.special_dims + b.common_dims
                        ));
                    }
                    if net.num_classes != b.num_classes {
                        p.push(format!(
                            "net.num_classes ({}) must equal data.blob.num_classes ({})",
                            net.num_classes, b.num_classes
                        ));
                    }
                }
            }
            Some(DataConfig::Csv(_)) => {}
        }
        if let Some(oe) = &self.oe {
            if !(oe.weight >= 0.0) {
                p.push(format!("oe.weight must be >= 0, got {}", oe.weight));
            }
            match (&self.data, oe.n_outliers, &oe.path) {
                (_, Some(_), Some(_)) => p.push("oe: give either n_outliers or path, not both".into()),
                (_, None, None) => p.push("oe: one of n_outliers or path is required".into()),
                (Some(DataConfig::Csv(_)), Some(_), None) => {
                    p.push("oe.n_outliers needs blob data; use oe.path with CSV data".into())
                }
                (_, Some(0), _) => p.push("oe.n_outliers must be >= 1".into()),
                _ => {}
            }
        }
        if self.landscape.scorer.needs_bank() {
            p.push(format!("landscape.scorer '{}' is not logit-based", self.landscape.scorer));
        }
        if self.landscape.directions == 0 {
            p.push("landscape.directions must be >= 1".into());
        }
        if !(self.landscape.scale > 0.0 && self.landscape.scale.is_finite()) {
            p.push("landscape.scale must be positive".into());
        }
        if let Some(w) = &self.width_sweep {
            if w.widths.is_empty() || w.widths.contains(&0) {
                p.push("width_sweep.widths must be a non-empty list of positive widths".into());
            }
        }
        p
    }

    pub fn validate_for_training(&self) -> Result<()> {
        let p = self.training_problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }
}

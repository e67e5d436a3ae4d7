//! Long-format evaluation log: one row per
//! `(round, epoch, model, scorer, OOD set)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scoring::Scorer;

pub const RUNLOG_HEADER: &str =
    "round,epoch,sparsity,model,scorer,ood_set,train_err,test_err,auroc,aupr,fpr95,aurc,e_aurc,aupr_err";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Online,
    Averaged,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Online => "online",
            ModelKind::Averaged => "ma",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(ModelKind::Online),
            "ma" => Ok(ModelKind::Averaged),
            other => Err(Error::InvalidArgument(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub round: usize,
    pub epoch: usize,
    /// Fraction of prunable weights removed.
    pub sparsity: f64,
    pub model: ModelKind,
    pub scorer: Scorer,
    pub ood_set: String,
    pub train_err: f64,
    pub test_err: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub aurc: f64,
    pub e_aurc: f64,
    /// NaN when every test prediction is correct.
    pub aupr_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    pub fn to_csv_string(&self) -> String {
        let mut s = String::with_capacity(64 + 160 * self.rows.len());
        s.push_str(RUNLOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:?},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                r.round,
                r.epoch,
                r.sparsity,
                r.model,
                r.scorer,
                r.ood_set,
                r.train_err,
                r.test_err,
                r.auroc,
                r.aupr,
                r.fpr95,
                r.aurc,
                r.e_aurc,
                r.aupr_err
            ));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == RUNLOG_HEADER => {}
            other => {
                return Err(Error::Parse {
                    line: 1,
                    column: 1,
                    message: format!("expected run log header, found {:?}", other.map(|o| o.1)),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let line_no = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(Error::Parse {
                    line: line_no,
                    column: f.len().min(14),
                    message: format!("expected 14 fields, found {}", f.len()),
                });
            }
            let num = |c: usize| -> Result<f64> {
                f[c].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    column: c + 1,
                    message: format!("'{}' is not a number", f[c]),
                })
            };
            let int = |c: usize| -> Result<usize> {
                f[c].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    column: c + 1,
                    message: format!("'{}' is not a count", f[c]),
                })
            };
            let at = |c: usize, e: Error| Error::Parse {
                line: line_no,
                column: c + 1,
                message: e.to_string(),
            };
            rows.push(RunRow {
                round: int(0)?,
                epoch: int(1)?,
                sparsity: num(2)?,
                model: f[3].parse().map_err(|e| at(3, e))?,
                scorer: f[4].parse().map_err(|e| at(4, e))?,
                ood_set: f[5].to_string(),
                train_err: num(6)?,
                test_err: num(7)?,
                auroc: num(8)?,
                aupr: num(9)?,
                fpr95: num(10)?,
                aurc: num(11)?,
                e_aurc: num(12)?,
                aupr_err: num(13)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    /// AUROC over epochs of one `(round, model, scorer)` series.
    pub fn auroc_series(&self, round: usize, model: ModelKind, scorer: Scorer) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.round == round && r.model == model && r.scorer == scorer)
            .map(|r| (r.epoch, r.auroc))
            .collect()
    }

    pub fn last_round(&self) -> Option<usize> {
        self.rows.iter().map(|r| r.round).max()
    }

    /// Rows of the last evaluated epoch of `round`.
    pub fn final_rows(&self, round: usize) -> Vec<&RunRow> {
        let last = self
            .rows
            .iter()
            .filter(|r| r.round == round)
            .map(|r| r.epoch)
            .max();
        self.rows
            .iter()
            .filter(|r| r.round == round && Some(r.epoch) == last)
            .collect()
    }
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

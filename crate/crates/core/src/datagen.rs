//! Synthetic data: the two-Gaussian special/common-feature model, a
//! multi-class blob task built on the same idea, and CSV ingestion.
//!
//! CSV schema: `f0,f1,…,fk,label`, one sample per row, label `-1` marks an
//! OOD sample. The exporter always writes a header; the loader accepts files
//! with or without one.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, LabRng};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    IdTrain,
    IdTest,
    Ood,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::IdTrain => "id_train",
            Provenance::IdTest => "id_test",
            Provenance::Ood => "ood",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id_train" => Ok(Provenance::IdTrain),
            "id_test" => Ok(Provenance::IdTest),
            "ood" => Ok(Provenance::Ood),
            other => Err(Error::InvalidArgument(format!("unknown provenance '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor2,
    /// Present exactly when `provenance` is not `Ood`.
    pub labels: Option<Vec<usize>>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor2, labels: Option<Vec<usize>>, provenance: Provenance) -> Result<Self> {
        match (&labels, provenance) {
            (Some(_), Provenance::Ood) => {
                return Err(Error::InvalidArgument("OOD datasets carry no labels".into()))
            }
            (None, Provenance::IdTrain | Provenance::IdTest) => {
                return Err(Error::InvalidArgument("ID datasets must be labeled".into()))
            }
            _ => {}
        }
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::shape(
                    "LabeledDataset",
                    format!("{} labels for {} rows", l.len(), inputs.rows()),
                ));
            }
        }
        Ok(Self {
            inputs,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            provenance: self.provenance,
        }
    }
}

/// Parameters of the two-class Gaussian model with one special feature and
/// `d` common features: `μ_ID = (1, η, …, η)`, `μ_OOD = (0, η, …, η)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianModelParams {
    pub d: usize,
    pub eta: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl GaussianModelParams {
    fn check(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

fn gaussian_rows(
    p: &GaussianModelParams,
    n: usize,
    special_mean: f64,
    rng: &mut LabRng,
) -> (Tensor2, Vec<bool>) {
    let dim = p.d + 1;
    let mut x = Tensor2::zeros(n, dim);
    let mut signs = Vec::with_capacity(n);
    for r in 0..n {
        let positive: bool = rng.random();
        let s = if positive { 1.0 } else { -1.0 };
        let row = x.row_mut(r);
        row[0] = s * special_mean + p.sigma * rng::normal(rng);
        for v in &mut row[1..] {
            *v = s * p.eta + p.sigma * rng::normal(rng);
        }
        signs.push(positive);
    }
    (x, signs)
}

/// ID draws `x ~ N(y·μ_ID, σ²I)` with `y` uniform on ±1, encoded as label
/// `0` for `y = −1` and `1` for `y = +1`.
pub fn sample_id(params: &GaussianModelParams, n: usize) -> Result<LabeledDataset> {
    params.check()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut rng = rng::rng_from(params.seed, &[rng::TAG_DATA, 0]);
    let (x, signs) = gaussian_rows(params, n, 1.0, &mut rng);
    let labels = signs.into_iter().map(usize::from).collect();
    LabeledDataset::new(x, Some(labels), Provenance::IdTest)
}

/// OOD draws `x ~ N(q·μ_OOD, σ²I)` with `q` uniform on ±1.
pub fn sample_ood(params: &GaussianModelParams, n: usize) -> Result<LabeledDataset> {
    params.check()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut rng = rng::rng_from(params.seed, &[rng::TAG_DATA, 1]);
    let (x, _) = gaussian_rows(params, n, 0.0, &mut rng);
    LabeledDataset::new(x, None, Provenance::Ood)
}

/// Multi-class analogue of the special/common model.
///
/// Inputs are `special_dims` special coordinates followed by `common_dims`
/// common ones. Class `c` centres its special coordinates on
/// `±class_separation · e_{c mod special_dims}` (`+` for the first
/// `special_dims` classes, `−` after) and its common coordinates on
/// `common_mean · s_c` for a fixed random sign pattern `s_c`. OOD samples
/// copy the common-coordinate law of a uniformly chosen class but sit on
/// special means no class uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobTaskSpec {
    pub num_classes: usize,
    pub special_dims: usize,
    pub common_dims: usize,
    pub class_separation: f64,
    pub common_mean: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BlobTaskSpec {
    pub fn input_dim(&self) -> usize {
        self.special_dims + self.common_dims
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.special_dims == 0 {
            p.push("blob.special_dims must be >= 1".into());
        }
        if self.num_classes < 2 {
            p.push("blob.num_classes must be >= 2".into());
        }
        if self.num_classes > 2 * self.special_dims {
            p.push(format!(
                "blob.num_classes ({}) may not exceed 2 * special_dims ({})",
                self.num_classes,
                2 * self.special_dims
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            p.push("blob.noise_sigma must be >= 0".into());
        }
        p
    }

    fn class_special_mean(&self, c: usize) -> (usize, f64) {
        let axis = c % self.special_dims;
        let sign = if c < self.special_dims { 1.0 } else { -1.0 };
        (axis, sign * self.class_separation)
    }

    /// Special-coordinate centres of the OOD clusters.
    fn ood_centres(&self) -> Vec<Option<(usize, f64)>> {
        if self.num_classes <= self.special_dims {
            (0..self.num_classes)
                .map(|j| Some((j, -self.class_separation)))
                .collect()
        } else {
            vec![None]
        }
    }

    fn common_signs(&self) -> Vec<Vec<f64>> {
        let mut rng = rng::rng_from(self.seed, &[rng::TAG_DATA, 99]);
        (0..self.num_classes)
            .map(|_| {
                (0..self.common_dims)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect()
    }

    fn fill_common(&self, row: &mut [f64], signs: &[f64], rng: &mut LabRng) {
        for (v, s) in row[self.special_dims..].iter_mut().zip(signs) {
            *v = self.common_mean * s + self.noise_sigma * rng::normal(rng);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlobTask {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub ood: LabeledDataset,
}

fn blob_id_split(
    spec: &BlobTaskSpec,
    signs: &[Vec<f64>],
    n: usize,
    tag: u64,
    provenance: Provenance,
) -> Result<LabeledDataset> {
    let mut rng = rng::rng_from(spec.seed, &[rng::TAG_DATA, tag]);
    let mut x = Tensor2::zeros(n, spec.input_dim());
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let c = r % spec.num_classes;
        let (axis, mean) = spec.class_special_mean(c);
        let row = x.row_mut(r);
        for (j, v) in row[..spec.special_dims].iter_mut().enumerate() {
            let mu = if j == axis { mean } else { 0.0 };
            *v = mu + spec.noise_sigma * rng::normal(&mut rng);
        }
        spec.fill_common(row, &signs[c], &mut rng);
        labels.push(c);
    }
    LabeledDataset::new(x, Some(labels), provenance)
}

pub fn make_blob_task(
    spec: &BlobTaskSpec,
    n_train: usize,
    n_test: usize,
    n_ood: usize,
) -> Result<BlobTask> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    for (name, n) in [("n_train", n_train), ("n_test", n_test), ("n_ood", n_ood)] {
        if n < spec.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{name} = {n} is smaller than num_classes = {}",
                spec.num_classes
            )));
        }
    }
    let signs = spec.common_signs();
    let train = blob_id_split(spec, &signs, n_train, 10, Provenance::IdTrain)?;
    let test = blob_id_split(spec, &signs, n_test, 11, Provenance::IdTest)?;

    let centres = spec.ood_centres();
    let mut rng = rng::rng_from(spec.seed, &[rng::TAG_DATA, 12]);
    let mut x = Tensor2::zeros(n_ood, spec.input_dim());
    for r in 0..n_ood {
        let centre = centres[r % centres.len()];
        let q = rng.random_range(0..spec.num_classes);
        let row = x.row_mut(r);
        for (j, v) in row[..spec.special_dims].iter_mut().enumerate() {
            let mu = match centre {
                Some((axis, m)) if axis == j => m,
                _ => 0.0,
            };
            *v = mu + spec.noise_sigma * rng::normal(&mut rng);
        }
        spec.fill_common(row, &signs[q], &mut rng);
    }
    let ood = LabeledDataset::new(x, None, Provenance::Ood)?;
    Ok(BlobTask { train, test, ood })
}

/// Auxiliary outliers for outlier-exposure training: special coordinates
/// drawn from an isotropic `N(0, (class_separation/2)²)` cloud, common
/// coordinates as for a random class. Uses its own seed stream, so it never
/// reproduces the evaluation OOD set.
pub fn make_outliers(spec: &BlobTaskSpec, n: usize) -> Result<LabeledDataset> {
    let signs = spec.common_signs();
    let mut rng = rng::rng_from(spec.seed, &[rng::TAG_OUTLIER]);
    let mut x = Tensor2::zeros(n, spec.input_dim());
    let spread = 0.5 * spec.class_separation;
    for r in 0..n {
        let q = rng.random_range(0..spec.num_classes);
        let row = x.row_mut(r);
        for v in &mut row[..spec.special_dims] {
            *v = spread * rng::normal(&mut rng);
        }
        spec.fill_common(row, &signs[q], &mut rng);
    }
    LabeledDataset::new(x, None, Provenance::Ood)
}

#[derive(Debug, Clone, Copy)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Provenance given to a file whose rows are all labeled.
    pub labeled_as: Provenance,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            labeled_as: Provenance::IdTrain,
        }
    }
}

/// Reads a numeric CSV whose last column is the label (`-1` = OOD).
///
/// A file must be all-OOD or all-labeled.
pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, opts)
}

pub fn parse_csv(reader: impl std::io::Read, opts: CsvOptions) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width: Option<usize> = None;
    let mut data = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    let mut first = true;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                column: 0,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if first && opts.has_header {
            first = false;
            continue;
        }
        first = false;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match width {
            None => {
                if rec.len() < 2 {
                    return Err(Error::Parse {
                        line,
                        column: 1,
                        message: "need at least one feature and a label".into(),
                    });
                }
                width = Some(rec.len());
            }
            Some(w) if w != rec.len() => {
                return Err(Error::Parse {
                    line,
                    column: rec.len().min(w) + 1,
                    message: format!("ragged row: {} fields, expected {w}", rec.len()),
                })
            }
            _ => {}
        }
        let n = rec.len();
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                column: j + 1,
                message: format!("non-numeric cell '{cell}'"),
            })?;
            if j + 1 < n {
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        column: j + 1,
                        message: "non-finite feature".into(),
                    });
                }
                data.push(v);
            } else if v == -1.0 {
                labels.push(None);
            } else if v >= 0.0 && v.fract() == 0.0 {
                labels.push(Some(v as usize));
            } else {
                return Err(Error::Parse {
                    line,
                    column: j + 1,
                    message: format!("label must be a class index or -1, got '{cell}'"),
                });
            }
        }
    }
    let Some(w) = width else {
        return Err(Error::Empty("empty dataset".into()));
    };
    let rows = labels.len();
    let inputs = Tensor2::from_vec(rows, w - 1, data)?;
    let ood_rows = labels.iter().filter(|l| l.is_none()).count();
    if ood_rows == rows {
        LabeledDataset::new(inputs, None, Provenance::Ood)
    } else if ood_rows == 0 {
        let labels = labels.into_iter().map(|l| l.expect("checked")).collect();
        LabeledDataset::new(inputs, Some(labels), opts.labeled_as)
    } else {
        Err(Error::InvalidArgument(format!(
            "file mixes {ood_rows} OOD rows with {} labeled rows; split it first",
            rows - ood_rows
        )))
    }
}

/// Writes a dataset in the CSV schema above. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_csv(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv_string(data)).map_err(|e| Error::io(path, e))
}

pub fn to_csv_string(data: &LabeledDataset) -> String {
    let mut out = String::new();
    for j in 0..data.dim() {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for (r, row) in data.inputs.row_iter().enumerate() {
        for v in row {
            out.push_str(&format!("{v:?},"));
        }
        match &data.labels {
            Some(l) => out.push_str(&l[r].to_string()),
            None => out.push_str("-1"),
        }
        out.push('\n');
    }
    out
}

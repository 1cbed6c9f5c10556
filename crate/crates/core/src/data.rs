//! Datasets: CSV ingestion, feature standardization, seeded splits and the
//! built-in synthetic regression generators.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BnnError, Result};
use crate::objective::Targets;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    Classification,
}

impl std::str::FromStr for Task {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(BnnError::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Per-feature affine map to zero mean, unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population statistics per column. Constant columns get `std = 1`.
    pub fn fit(features: &Tensor) -> Self {
        let (n, d) = (features.rows(), features.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, std }
    }

    pub fn identity(width: usize) -> Self {
        Standardization {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.mean.len() {
            return Err(BnnError::shape("standardize", &[self.mean.len()], features.shape()));
        }
        let d = self.mean.len();
        let mut out = features.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Features (standardized), targets and the standardization that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub targets: Targets,
    pub column_names: Vec<String>,
    pub target_name: String,
    pub standardization: Standardization,
}

impl Dataset {
    pub fn new(features: Tensor, targets: Targets) -> Result<Self> {
        if features.rank() != 2 || features.rows() != targets.len() {
            return Err(BnnError::shape("dataset", features.shape(), &[targets.len()]));
        }
        let d = features.cols();
        Ok(Dataset {
            column_names: (0..d).map(|j| format!("x{j}")).collect(),
            target_name: "y".into(),
            standardization: Standardization::identity(d),
            features,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            targets: self.targets.select(idx),
            column_names: self.column_names.clone(),
            target_name: self.target_name.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Seeded shuffle, then the first `⌈fraction·n⌉` rows train and the rest test.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = split_indices(self.len(), fraction, seed)?;
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Fits a standardization on these features and applies it.
    pub fn standardize(mut self) -> Result<Self> {
        let s = Standardization::fit(&self.features);
        self.features = s.apply(&self.features)?;
        self.standardization = s;
        Ok(self)
    }

    /// Writes the dataset (features as stored) as CSV with a header row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = self.column_names.clone();
        header.push(self.target_name.clone());
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(match &self.targets {
                Targets::Real(y) => y[i].to_string(),
                Targets::Labels(y) => y[i].to_string(),
            });
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> BnnError {
    BnnError::Data(e.to_string())
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(BnnError::Config(format!("split fraction {fraction} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut idx);
    let n_train = ((fraction * n as f64).ceil() as usize).min(n);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Parses a headered numeric CSV. Features are returned raw (not standardized).
pub fn read_csv(path: impl AsRef<Path>, target: &str, task: Task) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| BnnError::Data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let t_col = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| BnnError::Data(format!("target column {target:?} not in header {headers:?}")))?;
    let column_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t_col)
        .map(|(_, h)| h.clone())
        .collect();
    if column_names.is_empty() {
        return Err(BnnError::Data("no feature columns".into()));
    }
    let mut feats = Vec::new();
    let mut reals = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != headers.len() {
            return Err(BnnError::Data(format!(
                "row {row}: expected {} cells, found {}",
                headers.len(),
                rec.len()
            )));
        }
        for (j, cell) in rec.iter().enumerate() {
            if cell.is_empty() {
                return Err(BnnError::Data(format!("row {row}: missing value in column {:?}", headers[j])));
            }
            let v: f64 = cell.parse().map_err(|_| {
                BnnError::Data(format!("row {row}: non-numeric value {cell:?} in column {:?}", headers[j]))
            })?;
            if !v.is_finite() {
                return Err(BnnError::Data(format!("row {row}: non-finite value in column {:?}", headers[j])));
            }
            if j == t_col {
                match task {
                    Task::Regression => reals.push(v),
                    Task::Classification => {
                        if v < 0.0 || v.fract() != 0.0 {
                            return Err(BnnError::Data(format!(
                                "row {row}: class id {cell:?} in column {:?} is not a non-negative integer",
                                headers[j]
                            )));
                        }
                        labels.push(v as usize);
                    }
                }
            } else {
                feats.push(v);
            }
        }
    }
    let n = reals.len().max(labels.len());
    if n == 0 {
        return Err(BnnError::Data(format!("{}: no data rows", path.display())));
    }
    let features = Tensor::matrix(n, column_names.len(), feats)?;
    let targets = match task {
        Task::Regression => Targets::Real(reals),
        Task::Classification => Targets::Labels(labels),
    };
    Ok(Dataset {
        standardization: Standardization::identity(column_names.len()),
        features,
        targets,
        column_names,
        target_name: target.to_string(),
    })
}

/// Reads a CSV and standardizes its features, either with their own
/// statistics or with a stored standardization.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    target: &str,
    task: Task,
    standardization: Option<&Standardization>,
) -> Result<Dataset> {
    let raw = read_csv(path, target, task)?;
    match standardization {
        None => raw.standardize(),
        Some(s) => {
            let mut d = raw;
            d.features = s.apply(&d.features)?;
            d.standardization = s.clone();
            Ok(d)
        }
    }
}

/// Synthetic regression families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Synthetic {
    /// `y = 1 + Σ w_j x_j + noise`, `w = (2, -1, 0.5, 2, -1, …)`.
    Linear,
    /// `y = sin(3 x_0) + 0.5 Σ_{j≥1} x_j + noise`.
    Sine,
}

impl std::str::FromStr for Synthetic {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Synthetic::Linear),
            "sine" | "sin" | "sinusoidal" => Ok(Synthetic::Sine),
            other => Err(BnnError::Config(format!("unknown synthetic generator {other:?}"))),
        }
    }
}

pub const LINEAR_WEIGHTS: [f64; 3] = [2.0, -1.0, 0.5];
pub const LINEAR_INTERCEPT: f64 = 1.0;

/// Generates `n` rows with features uniform on `[-2, 2]` and Gaussian
/// observation noise of scale `noise`. Features are not standardized.
pub fn generate(kind: Synthetic, n: usize, width: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || width == 0 {
        return Err(BnnError::Config("synthetic data needs n ≥ 1 and width ≥ 1".into()));
    }
    let mut rng = RngStream::new(seed);
    let mut feats = Vec::with_capacity(n * width);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..width).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let clean = match kind {
            Synthetic::Linear => {
                LINEAR_INTERCEPT
                    + x.iter()
                        .enumerate()
                        .map(|(j, v)| LINEAR_WEIGHTS[j % LINEAR_WEIGHTS.len()] * v)
                        .sum::<f64>()
            }
            Synthetic::Sine => (3.0 * x[0]).sin() + 0.5 * x[1..].iter().sum::<f64>(),
        };
        ys.push(clean + noise * rng.normal());
        feats.extend(x);
    }
    Dataset::new(Tensor::matrix(n, width, feats)?, Targets::Real(ys))
}

/// Ordinary least squares with intercept via the normal equations.
/// Returns `(weights, intercept)`.
pub fn least_squares(x: &Tensor, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (n, d) = (x.rows(), x.cols());
    let p = d + 1;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for i in 0..n {
        let mut row: Vec<f64> = x.row(i).to_vec();
        row.push(1.0);
        for r in 0..p {
            b[r] += row[r] * y[i];
            for c in 0..p {
                a[r * p + c] += row[r] * row[c];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a[i * p + col].abs().total_cmp(&a[j * p + col].abs()))
            .unwrap();
        if a[piv * p + col].abs() < 1e-12 {
            return Err(BnnError::Numerical("singular design matrix".into()));
        }
        for c in 0..p {
            a.swap(col * p + c, piv * p + c);
        }
        b.swap(col, piv);
        for r in col + 1..p {
            let f = a[r * p + col] / a[col * p + col];
            for c in col..p {
                a[r * p + c] -= f * a[col * p + c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut sol = vec![0.0; p];
    for r in (0..p).rev() {
        let s: f64 = (r + 1..p).map(|c| a[r * p + c] * sol[c]).sum();
        sol[r] = (b[r] - s) / a[r * p + r];
    }
    let intercept = sol.pop().unwrap();
    Ok((sol, intercept))
}

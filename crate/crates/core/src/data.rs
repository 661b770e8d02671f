//! Tabular datasets: CSV ingestion, z-score standardization, seeded
//! train/test splitting and the synthetic generators used as desk-scale
//! test beds.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IRIS_CSV: &str = include_str!("../assets/iris.csv");
const WINE_CSV: &str = include_str!("../assets/wine.csv");

/// Columns whose spread falls below this (relative to their magnitude) are
/// treated as constant and standardized to zero.
const ZERO_VARIANCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Regression => TaskKind::Regression,
            Task::Classification { .. } => TaskKind::Classification,
        }
    }

    /// Width of a model's output layer for this task.
    pub fn n_outputs(&self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { n_classes } => *n_classes,
        }
    }
}

/// Selects the target column of a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetColumn {
    Name(String),
    Index(usize),
}

impl From<&str> for TargetColumn {
    /// Numeric strings select by index, anything else by header name.
    fn from(s: &str) -> Self {
        match s.parse::<usize>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(s.to_string()),
        }
    }
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Population mean and standard deviation of every column.
    pub fn fit(features: ArrayView2<f64>) -> Self {
        let (mean, std) = features
            .axis_iter(Axis(1))
            .map(|col| column_stats(col))
            .unzip();
        Scaler { mean, std }
    }

    pub fn is_constant(&self, j: usize) -> bool {
        self.std[j] <= ZERO_VARIANCE_TOL * self.mean[j].abs().max(1.0)
    }

    pub fn transform(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: features.ncols(),
            });
        }
        let mut out = features.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            if self.is_constant(j) {
                col.fill(0.0);
            } else {
                let (m, s) = (self.mean[j], self.std[j]);
                col.mapv_inplace(|v| (v - m) / s);
            }
        }
        Ok(out)
    }
}

fn column_stats(col: ArrayView1<f64>) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A feature matrix with targets. Classification targets are stored as
/// class indices in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    targets: Vec<f64>,
    feature_names: Vec<String>,
    task: Task,
    scaler: Option<Scaler>,
    source_rows: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        targets: Vec<f64>,
        feature_names: Vec<String>,
        task: Task,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if n < 2 {
            return Err(Error::TooFewRows { needed: 2, got: n });
        }
        if d == 0 {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        if targets.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: targets.len(),
            });
        }
        if feature_names.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: feature_names.len(),
            });
        }
        if let Task::Classification { n_classes } = task {
            if let Some(bad) = targets
                .iter()
                .find(|&&t| t.fract() != 0.0 || t < 0.0 || t >= n_classes as f64)
            {
                return Err(Error::invalid(format!(
                    "class label {bad} outside 0..{n_classes}"
                )));
            }
        }
        Ok(Dataset {
            features,
            targets,
            feature_names,
            task,
            scaler: None,
            source_rows: (0..n).collect(),
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Targets as class indices; `None` for regression data.
    pub fn labels(&self) -> Option<Vec<usize>> {
        match self.task {
            Task::Classification { .. } => Some(self.targets.iter().map(|&t| t as usize).collect()),
            Task::Regression => None,
        }
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        self.scaler.as_ref()
    }

    /// Row indices into the dataset this one was derived from.
    pub fn source_rows(&self) -> &[usize] {
        &self.source_rows
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Population standard deviation of each feature column.
    pub fn feature_std(&self) -> Vec<f64> {
        Scaler::fit(self.features.view()).std
    }

    /// Keeps only the listed feature columns, in the given order.
    pub fn select_features(&self, columns: &[usize]) -> Result<Dataset> {
        if columns.is_empty() {
            return Err(Error::invalid("no feature columns selected"));
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.n_features()) {
            return Err(Error::invalid(format!("feature index {bad} out of range")));
        }
        let mut out = self.clone();
        out.features = self.features.select(Axis(1), columns);
        out.feature_names = columns.iter().map(|&c| self.feature_names[c].clone()).collect();
        out.scaler = self.scaler.as_ref().map(|s| Scaler {
            mean: columns.iter().map(|&c| s.mean[c]).collect(),
            std: columns.iter().map(|&c| s.std[c]).collect(),
        });
        Ok(out)
    }

    /// Keeps only rows whose class label is listed; labels are re-indexed
    /// in the order given.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let labels = self
            .labels()
            .ok_or_else(|| Error::invalid("class selection needs classification data"))?;
        let rows: Vec<usize> = (0..self.n_rows())
            .filter(|&i| classes.contains(&labels[i]))
            .collect();
        let targets = rows
            .iter()
            .map(|&i| classes.iter().position(|&c| c == labels[i]).unwrap() as f64)
            .collect();
        let mut out = Dataset::new(
            self.features.select(Axis(0), &rows),
            targets,
            self.feature_names.clone(),
            Task::Classification {
                n_classes: classes.len(),
            },
        )?;
        out.scaler = self.scaler.clone();
        out.source_rows = rows.iter().map(|&i| self.source_rows[i]).collect();
        Ok(out)
    }

    fn take_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            feature_names: self.feature_names.clone(),
            task: self.task,
            scaler: self.scaler.clone(),
            source_rows: rows.iter().map(|&i| self.source_rows[i]).collect(),
        }
    }
}

/// Reads a headed CSV file. The returned dataset is not standardized.
pub fn load_csv(path: impl AsRef<Path>, target: &TargetColumn, task: TaskKind) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&text, target, task)
}

/// Parses CSV text with a header row; see [`load_csv`].
pub fn parse_csv(text: &str, target: &TargetColumn, task: TaskKind) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let target_idx = match target {
        TargetColumn::Name(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::UnknownColumn(name.clone()))?,
        TargetColumn::Index(i) if *i < header.len() => *i,
        TargetColumn::Index(i) => return Err(Error::UnknownColumn(i.to_string())),
    };
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(Error::invalid("csv has no feature columns"));
    }

    let mut values = Vec::new();
    let mut targets = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row numbers, header excluded
        let row = r + 1;
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::ParseCell {
                row,
                column: header[j].clone(),
                value: cell.to_string(),
            })?;
            if j == target_idx {
                targets.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = targets.len();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    let features = Array2::from_shape_vec((n, feature_names.len()), values)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let task = match task {
        TaskKind::Regression => Task::Regression,
        TaskKind::Classification => {
            let max = targets.iter().cloned().fold(0.0, f64::max);
            Task::Classification {
                n_classes: max as usize + 1,
            }
        }
    };
    Dataset::new(features, targets, feature_names, task)
}

/// The bundled Iris dataset (150 rows, 4 features, 3 classes).
pub fn iris() -> Dataset {
    parse_csv(IRIS_CSV, &TargetColumn::Name("target".into()), TaskKind::Classification)
        .expect("bundled iris.csv is valid")
}

/// The bundled Wine dataset (178 rows, 13 features, 3 classes).
pub fn wine() -> Dataset {
    parse_csv(WINE_CSV, &TargetColumn::Name("target".into()), TaskKind::Classification)
        .expect("bundled wine.csv is valid")
}

/// Shuffles rows with a seeded generator, holds out `test_fraction` of them
/// and z-scores both parts with statistics from the training part.
pub fn standardize_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = data.n_rows();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test < 1 || n - n_test < 2 {
        return Err(Error::invalid(format!(
            "test_fraction {test_fraction} leaves {n_test} test and {} train rows",
            n - n_test
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_rows, train_rows) = order.split_at(n_test);

    let mut train = data.take_rows(train_rows);
    let mut test = data.take_rows(test_rows);
    let scaler = Scaler::fit(train.features());
    train.features = scaler.transform(train.features())?;
    test.features = scaler.transform(test.features())?;
    train.scaler = Some(scaler.clone());
    test.scaler = Some(scaler);
    Ok((train, test))
}

/// Closed-form Friedman #1 response on the first five coordinates.
pub fn friedman1_target(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3] + 5.0 * x[4]
}

/// Friedman #1 regression problem: ten uniform features on [0, 1], of which
/// only the first five influence the target.
pub fn synth_friedman1(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::TooFewRows { needed: 10, got: n });
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Array2::from_shape_simple_fn((n, 10), || rng.random::<f64>());
    let targets = features
        .outer_iter()
        .map(|row| {
            let noise: f64 = rng.sample(StandardNormal);
            friedman1_target(row.as_slice().unwrap()) + noise_std * noise
        })
        .collect();
    let names = (1..=10).map(|i| format!("x{i}")).collect();
    Dataset::new(features, targets, names, Task::Regression)
}

/// Cluster centers for [`synth_blobs`]: every pair of centers is
/// `separation` apart when `n_classes <= d`, otherwise neighbours on a circle
/// (or a line when `d == 1`) are.
fn blob_centers(d: usize, n_classes: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..n_classes)
        .map(|c| {
            let mut center = vec![0.0; d];
            if n_classes <= d {
                center[c] = separation / 2f64.sqrt();
            } else if d == 1 {
                center[0] = c as f64 * separation;
            } else {
                let radius = separation / (2.0 * (PI / n_classes as f64).sin());
                let angle = 2.0 * PI * c as f64 / n_classes as f64;
                center[0] = radius * angle.cos();
                center[1] = radius * angle.sin();
            }
            center
        })
        .collect()
}

/// Isotropic unit-variance Gaussian clusters, one per class. Row `i` belongs
/// to class `i % n_classes`, so class counts differ by at most one.
pub fn synth_blobs(n: usize, d: usize, n_classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::invalid("blobs need at least two classes"));
    }
    if d == 0 {
        return Err(Error::invalid("blobs need at least one feature"));
    }
    if n < 2 * n_classes {
        return Err(Error::TooFewRows {
            needed: 2 * n_classes,
            got: n,
        });
    }
    if !(separation > 0.0) {
        return Err(Error::invalid("separation must be positive"));
    }
    let centers = blob_centers(d, n_classes, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::zeros((n, d));
    for (i, mut row) in features.outer_iter_mut().enumerate() {
        let center = &centers[i % n_classes];
        for (v, c) in row.iter_mut().zip(center) {
            let z: f64 = rng.sample(StandardNormal);
            *v = c + z;
        }
    }
    let targets = (0..n).map(|i| (i % n_classes) as f64).collect();
    let names = (1..=d).map(|i| format!("x{i}")).collect();
    Dataset::new(features, targets, names, Task::Classification { n_classes })
}

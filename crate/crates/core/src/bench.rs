//! Experiment harness: metric tables, black-box depth and neighbour-count
//! sweeps, decision-boundary grids and stability matrices, written as CSV
//! (with JSON twins where tabular) into a fresh output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blackbox::{argmax, mlp_train, MlpModel, TrainConfig};
use crate::data::{
    iris, load_csv, standardize_split, synth_blobs, synth_friedman1, wine, Dataset, TargetColumn, Task, TaskKind,
};
use crate::error::{Error, Result};
use crate::explain::{
    explain_instance, fit_ndt, perturb, proximity_weights, sample_neighborhood, scalar_blackbox, Explanation,
    NeighborhoodConfig, SurrogateConfig, SurrogateKind,
};
use crate::metrics::{
    average_metric, fidelity_r2, regularity_k, stability_matrix_of, stability_of, InstanceMetrics, MetricsReport,
    Summary,
};
use crate::ndt::{convert_dt_to_ndt, ndt_finetune, FinetuneConfig, Optimizer};
use crate::tree::{fit_weighted_cart, CartConfig, TreeTargets};

/// Upper bound on stability repeats; explanation seeds for different
/// instances are spaced this far apart.
pub const MAX_REPEATS: usize = 256;

/// Flat experiment description. Every field has a default, so a config file
/// only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Bundled names (`iris`, `wine`, `friedman1`, `blobs`) or CSV paths.
    pub datasets: Vec<String>,
    /// Target column for CSV datasets (name or 0-based index).
    pub target: Option<String>,
    /// `regression` or `classification`, for CSV datasets.
    pub task: Option<TaskKind>,
    /// Feature columns to keep (0-based), applied to every dataset.
    pub features: Option<Vec<usize>>,
    /// Classes to keep, applied to classification datasets.
    pub classes: Option<Vec<usize>>,
    pub synth_rows: usize,
    pub friedman_noise: f64,
    pub blob_features: usize,
    pub blob_classes: usize,
    pub blob_separation: f64,
    pub test_fraction: f64,
    pub hidden_sizes: Vec<usize>,
    pub mlp_learning_rate: f64,
    pub mlp_epochs: usize,
    pub mlp_batch_size: usize,
    pub surrogates: Vec<SurrogateKind>,
    pub n_samples: usize,
    pub kernel_width: Option<f64>,
    pub perturb_scale: f64,
    pub tree_depth: usize,
    pub min_leaf_weight: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub finetune_learning_rate: f64,
    pub finetune_epochs: usize,
    pub finetune_optimizer: Optimizer,
    pub n_repeats: usize,
    pub k: usize,
    pub n_test_instances: usize,
    /// Number of dataset seeds `seed, seed + 1, ...`; each reseeds data
    /// generation, the split and black-box training.
    pub n_dataset_seeds: usize,
    pub seed: u64,
    pub depth_range: Vec<usize>,
    pub depth_width: usize,
    pub k_range: Vec<usize>,
    pub grid_resolution: usize,
    /// Half side of the square grid around the explained instance, in
    /// standardized units.
    pub grid_half_width: f64,
    pub instance: usize,
    pub out: PathBuf,
    pub overwrite: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            datasets: vec!["iris".into()],
            target: None,
            task: None,
            features: None,
            classes: None,
            synth_rows: 2000,
            friedman_noise: 1.0,
            blob_features: 2,
            blob_classes: 2,
            blob_separation: 3.0,
            test_fraction: 0.25,
            hidden_sizes: vec![64, 32],
            mlp_learning_rate: 0.01,
            mlp_epochs: 200,
            mlp_batch_size: 32,
            surrogates: SurrogateKind::ALL.to_vec(),
            n_samples: 800,
            kernel_width: None,
            perturb_scale: 1.0,
            tree_depth: 4,
            min_leaf_weight: 0.0,
            gamma1: 1.0,
            gamma2: 1.0,
            finetune_learning_rate: 0.01,
            finetune_epochs: 200,
            finetune_optimizer: Optimizer::Adam,
            n_repeats: 5,
            k: 2,
            n_test_instances: 20,
            n_dataset_seeds: 3,
            seed: 0,
            depth_range: vec![1, 2, 3, 4],
            depth_width: 32,
            k_range: (1..=10).collect(),
            grid_resolution: 100,
            grid_half_width: 3.0,
            instance: 0,
            out: PathBuf::from("results"),
            overwrite: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::invalid("no datasets configured"));
        }
        if self.surrogates.is_empty() {
            return Err(Error::invalid("no surrogates configured"));
        }
        if self.n_test_instances < 1 {
            return Err(Error::invalid("n_test_instances must be at least 1"));
        }
        if self.n_dataset_seeds < 1 {
            return Err(Error::invalid("n_dataset_seeds must be at least 1"));
        }
        if self.n_repeats < 2 || self.n_repeats > MAX_REPEATS {
            return Err(Error::invalid(format!(
                "n_repeats must lie in 2..={MAX_REPEATS}, got {}",
                self.n_repeats
            )));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::invalid("hidden_sizes must be non-empty"));
        }
        if self.tree_depth < 1 {
            return Err(Error::invalid("tree_depth must be at least 1"));
        }
        if !(self.gamma2 > 0.0) || self.gamma1 < self.gamma2 {
            return Err(Error::invalid("gammas must satisfy gamma1 >= gamma2 > 0"));
        }
        self.neighborhood(0).validate()
    }

    pub fn neighborhood(&self, seed: u64) -> NeighborhoodConfig {
        NeighborhoodConfig {
            n_samples: self.n_samples,
            kernel_width: self.kernel_width,
            perturb_scale: self.perturb_scale,
            seed,
        }
    }

    pub fn surrogate_config(&self) -> SurrogateConfig {
        SurrogateConfig {
            cart: CartConfig {
                max_depth: self.tree_depth,
                min_leaf_weight: self.min_leaf_weight,
            },
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            finetune: FinetuneConfig {
                learning_rate: self.finetune_learning_rate,
                epochs: self.finetune_epochs,
                optimizer: self.finetune_optimizer,
                seed: self.seed,
            },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.mlp_learning_rate,
            epochs: self.mlp_epochs,
            batch_size: self.mlp_batch_size,
            seed,
        }
    }

    pub fn dataset_seeds(&self) -> Vec<u64> {
        (0..self.n_dataset_seeds as u64).map(|s| self.seed + s).collect()
    }
}

/// Formats like C's `%.6g`: six significant digits, trailing zeros removed.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Value as written to CSV, parsed back so JSON twins carry the same number.
fn rounded(v: f64) -> f64 {
    fmt_sig(v).parse().unwrap_or(v)
}

/// Builds the raw (unstandardized) dataset named `name`.
pub fn resolve_dataset(cfg: &ExperimentConfig, name: &str, seed: u64) -> Result<Dataset> {
    let data = match name.to_ascii_lowercase().as_str() {
        "iris" => iris(),
        "wine" => wine(),
        "friedman1" => synth_friedman1(cfg.synth_rows, cfg.friedman_noise, seed)?,
        "blobs" => synth_blobs(
            cfg.synth_rows,
            cfg.blob_features,
            cfg.blob_classes,
            cfg.blob_separation,
            seed,
        )?,
        _ => {
            let target = cfg.target.as_deref().ok_or_else(|| {
                Error::invalid(format!("dataset '{name}' is not bundled and no target column was given"))
            })?;
            load_csv(name, &TargetColumn::from(target), cfg.task.unwrap_or(TaskKind::Regression))?
        }
    };
    let data = match &cfg.features {
        Some(cols) => data.select_features(cols)?,
        None => data,
    };
    match (&cfg.classes, data.task()) {
        (Some(classes), Task::Classification { .. }) => data.select_classes(classes),
        _ => Ok(data),
    }
}

/// A standardized split with a black box trained on its training part.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: String,
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub model: MlpModel,
    pub feature_scales: Vec<f64>,
}

pub fn prepare(cfg: &ExperimentConfig, dataset: &str, seed: u64, hidden_sizes: &[usize]) -> Result<Prepared> {
    let raw = resolve_dataset(cfg, dataset, seed)?;
    let (train, test) = standardize_split(&raw, cfg.test_fraction, seed)?;
    let (model, _) = mlp_train(&train, hidden_sizes, &cfg.train_config(seed))?;
    let feature_scales = train.feature_std();
    Ok(Prepared {
        dataset: dataset.to_string(),
        seed,
        train,
        test,
        model,
        feature_scales,
    })
}

impl Prepared {
    pub fn n_instances(&self, cfg: &ExperimentConfig) -> Result<usize> {
        if cfg.n_test_instances > self.test.n_rows() {
            return Err(Error::invalid(format!(
                "n_test_instances {} exceeds the {} test rows of {}",
                cfg.n_test_instances,
                self.test.n_rows(),
                self.dataset
            )));
        }
        Ok(cfg.n_test_instances)
    }

    pub fn instance(&self, i: usize) -> ArrayView1<'_, f64> {
        self.test.features().index_axis_move(Axis(0), i)
    }

    /// Explanation seed of test instance `i`; stability repeat `r` uses
    /// this plus `r`.
    pub fn instance_seed(&self, i: usize) -> u64 {
        (self.seed << 32).wrapping_add((i * MAX_REPEATS) as u64)
    }

    pub fn explain(&self, cfg: &ExperimentConfig, i: usize, kind: SurrogateKind, repeat: usize) -> Result<Explanation> {
        let x = self.instance(i);
        let f = scalar_blackbox(&self.model, x)?;
        let ncfg = cfg.neighborhood(self.instance_seed(i) + repeat as u64);
        explain_instance(&f, x, kind, &ncfg, &cfg.surrogate_config(), &self.feature_scales)
    }

    /// All `n_repeats` explanations of instance `i`.
    pub fn repeats(&self, cfg: &ExperimentConfig, i: usize, kind: SurrogateKind) -> Result<Vec<Explanation>> {
        (0..cfg.n_repeats).map(|r| self.explain(cfg, i, kind, r)).collect()
    }

    /// First-repeat explanations of the first `n` test instances.
    pub fn explanations(&self, cfg: &ExperimentConfig, kind: SurrogateKind, n: usize) -> Result<Vec<Explanation>> {
        (0..n).into_par_iter().map(|i| self.explain(cfg, i, kind, 0)).collect()
    }

    /// Per-instance fidelity of the first-repeat explanations.
    pub fn fidelities(&self, cfg: &ExperimentConfig, kind: SurrogateKind) -> Result<Vec<Option<f64>>> {
        let n = self.n_instances(cfg)?;
        Ok(self.explanations(cfg, kind, n)?.into_iter().map(|e| e.local_fidelity).collect())
    }

    /// Fidelity, stability and regularity for one surrogate.
    pub fn evaluate(&self, cfg: &ExperimentConfig, kind: SurrogateKind) -> Result<MetricsReport> {
        let n = self.n_instances(cfg)?;
        let runs: Vec<Vec<Explanation>> = (0..n)
            .into_par_iter()
            .map(|i| self.repeats(cfg, i, kind))
            .collect::<Result<_>>()?;
        let first: Vec<Vec<f64>> = runs.iter().map(|r| r[0].vector.clone()).collect();
        let regularity = if n > cfg.k {
            regularity_k(&first, self.test.features().slice(ndarray::s![..n, ..]), cfg.k)?
                .into_iter()
                .map(Some)
                .collect()
        } else {
            vec![None; n]
        };
        let per_instance = runs
            .iter()
            .zip(regularity)
            .enumerate()
            .map(|(i, (reps, reg))| {
                let vectors: Vec<Vec<f64>> = reps.iter().map(|e| e.vector.clone()).collect();
                Ok(InstanceMetrics {
                    instance: i,
                    fidelity: reps[0].local_fidelity,
                    stability: stability_of(&vectors)?,
                    regularity: reg,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport::from_instances(per_instance, cfg.n_samples, cfg.n_repeats, cfg.k))
    }
}

/// One failed (dataset, seed, surrogate) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub dataset: String,
    pub seed: Option<u64>,
    pub surrogate: Option<SurrogateKind>,
    pub detail: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub files: Vec<String>,
    pub errors: Vec<CellError>,
}

impl Manifest {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean: f64,
    pub std: f64,
    pub n_used: usize,
}

impl MetricCell {
    fn from_summary(s: Summary) -> Self {
        MetricCell {
            mean: rounded(s.mean),
            std: rounded(s.std),
            n_used: s.n_used,
        }
    }

    fn render(cell: &Option<MetricCell>) -> String {
        match cell {
            Some(c) => format!("{} ± {}", fmt_sig(c.mean), fmt_sig(c.std)),
            None => "NA".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCells {
    pub stability: Option<MetricCell>,
    pub fidelity: Option<MetricCell>,
    pub regularity: Option<MetricCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub cells: BTreeMap<SurrogateKind, SurrogateCells>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub surrogates: Vec<SurrogateKind>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        let mut header = vec!["dataset".to_string()];
        for s in &self.surrogates {
            for m in ["stability", "fidelity", "regularity"] {
                header.push(format!("{s}_{m}"));
            }
        }
        let mut records = vec![header];
        for row in &self.rows {
            let mut rec = vec![row.dataset.clone()];
            for s in &self.surrogates {
                let empty = SurrogateCells {
                    stability: None,
                    fidelity: None,
                    regularity: None,
                };
                let c = row.cells.get(s).unwrap_or(&empty);
                rec.push(MetricCell::render(&c.stability));
                rec.push(MetricCell::render(&c.fidelity));
                rec.push(MetricCell::render(&c.regularity));
            }
            records.push(rec);
        }
        write_csv(records)
    }
}

fn write_csv(records: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Per-(dataset, seed, surrogate) metric reports backing a [`Table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub dataset: String,
    pub seed: u64,
    pub surrogate: SurrogateKind,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRun {
    pub table: Table,
    pub reports: Vec<ReportEntry>,
    pub errors: Vec<CellError>,
}

fn cell_error(dataset: &str, seed: Option<u64>, surrogate: Option<SurrogateKind>, err: &Error) -> CellError {
    CellError {
        dataset: dataset.to_string(),
        seed,
        surrogate,
        detail: None,
        message: err.to_string(),
    }
}

/// Evaluates every dataset × surrogate. Failures are recorded per cell and
/// leave the remaining cells untouched.
pub fn compute_table(cfg: &ExperimentConfig) -> Result<TableRun> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for name in &cfg.datasets {
        let mut pooled: BTreeMap<SurrogateKind, Vec<InstanceMetrics>> = BTreeMap::new();
        let mut failed: Vec<SurrogateKind> = Vec::new();
        for seed in cfg.dataset_seeds() {
            let prep = match prepare(cfg, name, seed, &cfg.hidden_sizes) {
                Ok(p) => p,
                Err(e) => {
                    errors.push(cell_error(name, Some(seed), None, &e));
                    failed.extend(cfg.surrogates.iter().copied());
                    continue;
                }
            };
            for &kind in &cfg.surrogates {
                match prep.evaluate(cfg, kind) {
                    Ok(report) => {
                        pooled.entry(kind).or_default().extend(report.per_instance.iter().cloned());
                        reports.push(ReportEntry {
                            dataset: name.clone(),
                            seed,
                            surrogate: kind,
                            report,
                        });
                    }
                    Err(e) => {
                        errors.push(cell_error(name, Some(seed), Some(kind), &e));
                        failed.push(kind);
                    }
                }
            }
        }
        let mut cells = BTreeMap::new();
        for &kind in &cfg.surrogates {
            let metrics = if failed.contains(&kind) {
                Vec::new()
            } else {
                pooled.remove(&kind).unwrap_or_default()
            };
            let summarize = |pick: fn(&InstanceMetrics) -> Option<f64>| {
                let vals: Vec<Option<f64>> = metrics.iter().map(pick).collect();
                average_metric(&vals).ok().map(MetricCell::from_summary)
            };
            cells.insert(
                kind,
                SurrogateCells {
                    stability: summarize(|m| m.stability),
                    fidelity: summarize(|m| m.fidelity),
                    regularity: summarize(|m| m.regularity),
                },
            );
        }
        rows.push(TableRow {
            dataset: name.clone(),
            cells,
        });
    }
    Ok(TableRun {
        table: Table {
            surrogates: cfg.surrogates.clone(),
            rows,
        },
        reports,
        errors,
    })
}

/// Creates the output directory; an existing one is only reused with
/// `overwrite`.
pub fn prepare_output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone();
    if dir.exists() && !cfg.overwrite {
        return Err(Error::invalid(format!(
            "output directory {} already exists (use overwrite to replace its files)",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn write_file(dir: &Path, name: &str, contents: &str, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| Error::Io { path, source })?;
    files.push(name.to_string());
    Ok(())
}

fn finish(dir: &Path, command: &str, mut files: Vec<String>, errors: Vec<CellError>) -> Result<Manifest> {
    files.push("manifest.json".into());
    let manifest = Manifest {
        command: command.to_string(),
        files,
        errors,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|source| Error::Io { path, source })?;
    Ok(manifest)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig, files: &mut Vec<String>) -> Result<()> {
    write_file(dir, "config.json", &cfg.to_json()?, files)
}

/// Metric table over datasets × surrogates: `table.csv`, `table.json`,
/// per-instance `reports.json`, `config.json` and `manifest.json`.
pub fn run_table(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = prepare_output_dir(cfg)?;
    let run = compute_table(cfg)?;
    let mut files = Vec::new();
    write_file(&dir, "table.csv", &run.table.to_csv()?, &mut files)?;
    write_file(&dir, "table.json", &serde_json::to_string_pretty(&run.table)?, &mut files)?;
    write_file(&dir, "reports.json", &serde_json::to_string_pretty(&run.reports)?, &mut files)?;
    write_config(&dir, cfg, &mut files)?;
    finish(&dir, "run-table", files, run.errors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    /// Black-box depth or neighbour count.
    pub param: usize,
    pub surrogate: SurrogateKind,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n_used: usize,
}

fn sweep_row(dataset: &str, param: usize, surrogate: SurrogateKind, values: &[Option<f64>]) -> SweepRow {
    match average_metric(values) {
        Ok(s) => SweepRow {
            dataset: dataset.to_string(),
            param,
            surrogate,
            mean: Some(s.mean),
            std: Some(s.std),
            n_used: s.n_used,
        },
        Err(_) => SweepRow {
            dataset: dataset.to_string(),
            param,
            surrogate,
            mean: None,
            std: None,
            n_used: 0,
        },
    }
}

fn sweep_csv(rows: &[SweepRow], param: &str, metric: &str) -> Result<String> {
    let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_else(|| "NA".into());
    let mut records = vec![vec![
        "dataset".to_string(),
        param.to_string(),
        "surrogate".to_string(),
        format!("{metric}_mean"),
        format!("{metric}_std"),
        "n_used".to_string(),
    ]];
    for r in rows {
        records.push(vec![
            r.dataset.clone(),
            r.param.to_string(),
            r.surrogate.to_string(),
            opt(r.mean),
            opt(r.std),
            r.n_used.to_string(),
        ]);
    }
    write_csv(records)
}

fn rounded_rows(rows: &[SweepRow]) -> Vec<SweepRow> {
    rows.iter()
        .map(|r| SweepRow {
            mean: r.mean.map(rounded),
            std: r.std.map(rounded),
            ..r.clone()
        })
        .collect()
}

/// Fidelity per surrogate for black boxes with `depth` hidden layers of
/// `depth_width` units, pooled over dataset seeds.
pub fn compute_depth_sweep(cfg: &ExperimentConfig) -> Result<(Vec<SweepRow>, Vec<CellError>)> {
    cfg.validate()?;
    if cfg.depth_range.is_empty() || cfg.depth_range.contains(&0) {
        return Err(Error::invalid("depth_range must be non-empty and positive"));
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for name in &cfg.datasets {
        for &depth in &cfg.depth_range {
            let hidden = vec![cfg.depth_width; depth];
            let mut pooled: BTreeMap<SurrogateKind, Vec<Option<f64>>> = BTreeMap::new();
            let mut failed = Vec::new();
            for seed in cfg.dataset_seeds() {
                let prep = match prepare(cfg, name, seed, &hidden) {
                    Ok(p) => p,
                    Err(e) => {
                        let mut err = cell_error(name, Some(seed), None, &e);
                        err.detail = Some(format!("depth {depth}"));
                        errors.push(err);
                        failed.extend(cfg.surrogates.iter().copied());
                        continue;
                    }
                };
                for &kind in &cfg.surrogates {
                    match prep.fidelities(cfg, kind) {
                        Ok(v) => pooled.entry(kind).or_default().extend(v),
                        Err(e) => {
                            let mut err = cell_error(name, Some(seed), Some(kind), &e);
                            err.detail = Some(format!("depth {depth}"));
                            errors.push(err);
                            failed.push(kind);
                        }
                    }
                }
            }
            for &kind in &cfg.surrogates {
                let vals = if failed.contains(&kind) {
                    Vec::new()
                } else {
                    pooled.remove(&kind).unwrap_or_default()
                };
                rows.push(sweep_row(name, depth, kind, &vals));
            }
        }
    }
    Ok((rows, errors))
}

pub fn run_depth_sweep(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = prepare_output_dir(cfg)?;
    let (rows, errors) = compute_depth_sweep(cfg)?;
    let mut files = Vec::new();
    write_file(&dir, "depth_sweep.csv", &sweep_csv(&rows, "depth", "fidelity")?, &mut files)?;
    write_file(
        &dir,
        "depth_sweep.json",
        &serde_json::to_string_pretty(&rounded_rows(&rows))?,
        &mut files,
    )?;
    write_config(&dir, cfg, &mut files)?;
    finish(&dir, "depth-sweep", files, errors)
}

/// First-repeat explanation vectors of one dataset seed and the features of
/// the explained instances.
type CachedExplanations = (Vec<Vec<f64>>, Array2<f64>);

/// Regularity for each `k` in `k_range`, reusing one set of explanations per
/// (dataset seed, surrogate) across all `k`.
pub fn compute_k_sweep(cfg: &ExperimentConfig) -> Result<(Vec<SweepRow>, Vec<CellError>)> {
    cfg.validate()?;
    if cfg.k_range.is_empty() || cfg.k_range.contains(&0) {
        return Err(Error::invalid("k_range must be non-empty and positive"));
    }
    let max_k = *cfg.k_range.iter().max().unwrap();
    if max_k >= cfg.n_test_instances {
        return Err(Error::invalid(format!(
            "largest k ({max_k}) must be below n_test_instances ({})",
            cfg.n_test_instances
        )));
    }
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for name in &cfg.datasets {
        let mut cache: BTreeMap<SurrogateKind, Vec<CachedExplanations>> = BTreeMap::new();
        let mut failed = Vec::new();
        for seed in cfg.dataset_seeds() {
            let prep = match prepare(cfg, name, seed, &cfg.hidden_sizes) {
                Ok(p) => p,
                Err(e) => {
                    errors.push(cell_error(name, Some(seed), None, &e));
                    failed.extend(cfg.surrogates.iter().copied());
                    continue;
                }
            };
            for &kind in &cfg.surrogates {
                let result = prep
                    .n_instances(cfg)
                    .and_then(|n| Ok((n, prep.explanations(cfg, kind, n)?)));
                match result {
                    Ok((n, exps)) => {
                        let vectors = exps.into_iter().map(|e| e.vector).collect();
                        let feats = prep.test.features().slice(ndarray::s![..n, ..]).to_owned();
                        cache.entry(kind).or_default().push((vectors, feats));
                    }
                    Err(e) => {
                        errors.push(cell_error(name, Some(seed), Some(kind), &e));
                        failed.push(kind);
                    }
                }
            }
        }
        for &k in &cfg.k_range {
            for &kind in &cfg.surrogates {
                let mut vals = Vec::new();
                if !failed.contains(&kind) {
                    for (vectors, feats) in cache.get(&kind).map(Vec::as_slice).unwrap_or(&[]) {
                        vals.extend(regularity_k(vectors, feats.view(), k)?.into_iter().map(Some));
                    }
                }
                rows.push(sweep_row(name, k, kind, &vals));
            }
        }
    }
    Ok((rows, errors))
}

pub fn run_k_sweep(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = prepare_output_dir(cfg)?;
    let (rows, errors) = compute_k_sweep(cfg)?;
    let mut files = Vec::new();
    write_file(&dir, "k_sweep.csv", &sweep_csv(&rows, "k", "regularity")?, &mut files)?;
    write_file(
        &dir,
        "k_sweep.json",
        &serde_json::to_string_pretty(&rounded_rows(&rows))?,
        &mut files,
    )?;
    write_config(&dir, cfg, &mut files)?;
    finish(&dir, "k-sweep", files, errors)
}

/// Surrogates of the black box's decision around one instance of a
/// two-feature dataset, evaluated on a square lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrid {
    /// Columns: x, y, f_pred, dt_pred, ndt_init_pred, ndt_tuned_pred.
    pub rows: Array2<f64>,
    /// Proximity-weighted agreement with the black box on the neighbourhood
    /// (class agreement for classification, R² for regression).
    pub agreement_dt: Option<f64>,
    pub agreement_ndt_init: Option<f64>,
    pub agreement_ndt_tuned: Option<f64>,
    pub loss_init: f64,
    pub loss_tuned: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySummary {
    pub dataset: String,
    pub seed: u64,
    pub instance: Vec<f64>,
    pub agreement_dt: Option<f64>,
    pub agreement_ndt_init: Option<f64>,
    pub agreement_ndt_tuned: Option<f64>,
    pub loss_init: f64,
    pub loss_tuned: f64,
    pub diverged: bool,
}

fn lattice(x: ArrayView1<f64>, half_width: f64, resolution: usize) -> Array2<f64> {
    let axis = |c: f64| -> Vec<f64> {
        if resolution == 1 {
            return vec![c];
        }
        (0..resolution)
            .map(|i| c - half_width + 2.0 * half_width * i as f64 / (resolution - 1) as f64)
            .collect()
    };
    let (xs, ys) = (axis(x[0]), axis(x[1]));
    let mut out = Array2::zeros((resolution * resolution, 2));
    for (r, &yv) in ys.iter().enumerate() {
        for (c, &xv) in xs.iter().enumerate() {
            out[[r * resolution + c, 0]] = xv;
            out[[r * resolution + c, 1]] = yv;
        }
    }
    out
}

fn classes(scores: ArrayView2<f64>) -> Vec<f64> {
    scores.outer_iter().map(|r| argmax(r) as f64).collect()
}

fn weighted_agreement(a: &[f64], b: &[f64], w: &[f64]) -> Option<f64> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let hit: f64 = a.iter().zip(b).zip(w).filter(|((p, q), _)| p == q).map(|(_, w)| w).sum();
    Some(hit / total)
}

/// Decision-boundary protocol around test instance `cfg.instance`. For
/// classification the surrogates are a weighted classification tree on the
/// black box's predicted labels and the NDT converted from it, fine-tuned
/// on one-hot targets; for regression they are the explanation surrogates.
pub fn boundary_grid(prep: &Prepared, cfg: &ExperimentConfig, seed: u64) -> Result<BoundaryGrid> {
    if prep.test.n_features() != 2 {
        return Err(Error::invalid(format!(
            "boundary grid needs exactly 2 features, dataset has {}",
            prep.test.n_features()
        )));
    }
    if cfg.grid_resolution < 1 {
        return Err(Error::invalid("grid_resolution must be at least 1"));
    }
    if cfg.instance >= prep.test.n_rows() {
        return Err(Error::invalid(format!("instance {} out of range", cfg.instance)));
    }
    let x = prep.instance(cfg.instance);
    let grid = lattice(x, cfg.grid_half_width, cfg.grid_resolution);
    let ncfg = cfg.neighborhood(seed);
    let scfg = cfg.surrogate_config();
    let model = &prep.model;

    let (f_grid, dt_grid, init_grid, tuned_grid, agreements, losses) = match model.task() {
        Task::Classification { n_classes } => {
            let points = perturb(x, &prep.feature_scales, &ncfg)?;
            let weights = proximity_weights(points.view(), x, ncfg.sigma(2))?;
            let labels: Vec<usize> = model.predict(points.view())?.outer_iter().map(argmax).collect();
            let tree = fit_weighted_cart(
                points.view(),
                TreeTargets::Classification {
                    labels: &labels,
                    n_classes,
                },
                &weights,
                &scfg.cart,
            )?;
            let total: f64 = weights.iter().sum();
            let mut one_hot = Array2::zeros((labels.len(), n_classes));
            let mut reference = vec![0.0; n_classes];
            for (i, &l) in labels.iter().enumerate() {
                one_hot[[i, l]] = 1.0;
                reference[l] += weights[i] / total;
            }
            let init = convert_dt_to_ndt(&tree, scfg.gamma1, scfg.gamma2)?.with_leaf_reference(&reference)?;
            let result = ndt_finetune(&init, points.view(), one_hot.view(), &weights, &scfg.finetune)?;
            let f_lab: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
            let agree = |pred: Vec<f64>| weighted_agreement(&f_lab, &pred, &weights);
            let agreements = (
                agree(classes(tree.predict(points.view())?.view())),
                agree(classes(init.forward(points.view())?.view())),
                agree(classes(result.params.forward(points.view())?.view())),
            );
            (
                classes(model.predict(grid.view())?.view()),
                classes(tree.predict(grid.view())?.view()),
                classes(init.forward(grid.view())?.view()),
                classes(result.params.forward(grid.view())?.view()),
                agreements,
                (result.initial_loss(), result.final_loss(), result.diverged),
            )
        }
        Task::Regression => {
            let f = scalar_blackbox(model, x)?;
            let neigh = sample_neighborhood(&f, x, &ncfg, &prep.feature_scales)?;
            let fit = fit_ndt(&neigh, &scfg)?;
            let col = |a: Array2<f64>| a.column(0).to_vec();
            let r2 = |g: Vec<f64>| fidelity_r2(&neigh.f_vals, &g);
            let agreements = (
                r2(col(fit.tree.predict(neigh.points.view())?))?,
                r2(col(fit.initial.forward(neigh.points.view())?))?,
                r2(col(fit.tuned.forward(neigh.points.view())?))?,
            );
            (
                f(grid.view())?.to_vec(),
                col(fit.tree.predict(grid.view())?),
                col(fit.initial.forward(grid.view())?),
                col(fit.tuned.forward(grid.view())?),
                agreements,
                (fit.initial_loss, fit.final_loss, fit.diverged),
            )
        }
    };
    let mut rows = Array2::zeros((grid.nrows(), 6));
    rows.column_mut(0).assign(&grid.column(0));
    rows.column_mut(1).assign(&grid.column(1));
    for (j, col) in [f_grid, dt_grid, init_grid, tuned_grid].into_iter().enumerate() {
        rows.column_mut(j + 2).assign(&Array1::from(col));
    }
    Ok(BoundaryGrid {
        rows,
        agreement_dt: agreements.0,
        agreement_ndt_init: agreements.1,
        agreement_ndt_tuned: agreements.2,
        loss_init: losses.0,
        loss_tuned: losses.1,
        diverged: losses.2,
    })
}

fn matrix_csv(header: &[&str], m: ArrayView2<f64>) -> Result<String> {
    let mut records = Vec::new();
    if !header.is_empty() {
        records.push(header.iter().map(|s| s.to_string()).collect());
    }
    for row in m.outer_iter() {
        records.push(row.iter().map(|&v| fmt_sig(v)).collect());
    }
    write_csv(records)
}

/// Writes `boundary_grid.csv` and `boundary_summary.json` for the first
/// dataset and the first dataset seed.
pub fn export_boundary_grid(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = prepare_output_dir(cfg)?;
    let name = &cfg.datasets[0];
    let prep = prepare(cfg, name, cfg.seed, &cfg.hidden_sizes)?;
    let seed = prep.instance_seed(cfg.instance);
    let grid = boundary_grid(&prep, cfg, seed)?;
    let mut files = Vec::new();
    let header = ["x", "y", "f_pred", "dt_pred", "ndt_init_pred", "ndt_tuned_pred"];
    write_file(&dir, "boundary_grid.csv", &matrix_csv(&header, grid.rows.view())?, &mut files)?;
    let summary = BoundarySummary {
        dataset: name.clone(),
        seed: cfg.seed,
        instance: prep.instance(cfg.instance).to_vec(),
        agreement_dt: grid.agreement_dt,
        agreement_ndt_init: grid.agreement_ndt_init,
        agreement_ndt_tuned: grid.agreement_ndt_tuned,
        loss_init: grid.loss_init,
        loss_tuned: grid.loss_tuned,
        diverged: grid.diverged,
    };
    write_file(&dir, "boundary_summary.json", &serde_json::to_string_pretty(&summary)?, &mut files)?;
    write_config(&dir, cfg, &mut files)?;
    finish(&dir, "boundary-grid", files, Vec::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityMatrixEntry {
    pub surrogate: SurrogateKind,
    pub matrix: Vec<Vec<f64>>,
    pub stability: Option<f64>,
}

/// R×R cosine matrices of the repeated explanations of one test instance,
/// one per surrogate, for the first dataset and dataset seed.
pub fn compute_stability_matrices(
    prep: &Prepared,
    cfg: &ExperimentConfig,
) -> (Vec<StabilityMatrixEntry>, Vec<CellError>) {
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for &kind in &cfg.surrogates {
        let result = (|| {
            if cfg.instance >= prep.test.n_rows() {
                return Err(Error::invalid(format!("instance {} out of range", cfg.instance)));
            }
            let vectors: Vec<Vec<f64>> = prep
                .repeats(cfg, cfg.instance, kind)?
                .into_iter()
                .map(|e| e.vector)
                .collect();
            let m = stability_matrix_of(&vectors)?;
            Ok(StabilityMatrixEntry {
                surrogate: kind,
                matrix: m.outer_iter().map(|r| r.to_vec()).collect(),
                stability: stability_of(&vectors)?,
            })
        })();
        match result {
            Ok(e) => entries.push(e),
            Err(e) => errors.push(cell_error(&prep.dataset, Some(prep.seed), Some(kind), &e)),
        }
    }
    (entries, errors)
}

pub fn export_stability_matrix(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = prepare_output_dir(cfg)?;
    let name = &cfg.datasets[0];
    let prep = prepare(cfg, name, cfg.seed, &cfg.hidden_sizes)?;
    let (entries, errors) = compute_stability_matrices(&prep, cfg);
    let mut files = Vec::new();
    for e in &entries {
        let r = e.matrix.len();
        let m = Array2::from_shape_fn((r, r), |(i, j)| e.matrix[i][j]);
        write_file(
            &dir,
            &format!("stability_matrix_{}.csv", e.surrogate),
            &matrix_csv(&[], m.view())?,
            &mut files,
        )?;
    }
    write_file(&dir, "stability_matrix.json", &serde_json::to_string_pretty(&entries)?, &mut files)?;
    write_config(&dir, cfg, &mut files)?;
    finish(&dir, "stability-matrix", files, errors)
}

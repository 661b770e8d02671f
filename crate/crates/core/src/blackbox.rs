//! Multilayer-perceptron black box trained with plain mini-batch gradient
//! descent. ReLU hidden layers, affine output: a single value for regression
//! or one score per class (pre-softmax) for classification.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
    task: Task,
}

/// Per-epoch mean training loss. Regression losses are measured on
/// z-scored targets, classification losses are softmax cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub loss_trace: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(self.initial_loss)
    }
}

impl MlpModel {
    /// He-normal weights, zero biases.
    pub fn initialize(n_inputs: usize, hidden_sizes: &[usize], task: Task, seed: u64) -> Result<Self> {
        if n_inputs == 0 {
            return Err(Error::invalid("model needs at least one input"));
        }
        if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden sizes must be non-empty and positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![n_inputs];
        sizes.extend_from_slice(hidden_sizes);
        sizes.push(task.n_outputs());
        let layers = sizes
            .windows(2)
            .map(|w| {
                let scale = (2.0 / w[0] as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((w[1], w[0]), || {
                    let z: f64 = rng.sample(StandardNormal);
                    scale * z
                });
                DenseLayer {
                    weights,
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(MlpModel { layers, task })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, task: Task) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].weights.nrows() != w[1].weights.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].weights.nrows(),
                    got: w[1].weights.ncols(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: l.weights.nrows(),
                    got: l.bias.len(),
                });
            }
        }
        let out = layers.last().unwrap().weights.nrows();
        if out != task.n_outputs() {
            return Err(Error::DimensionMismatch {
                expected: task.n_outputs(),
                got: out,
            });
        }
        Ok(MlpModel { layers, task })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.n_inputs()];
        sizes.extend(self.layers.iter().map(|l| l.weights.nrows()));
        sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.task.n_outputs()
    }

    /// Raw outputs, one row per point: the regression value, or the class
    /// scores before softmax.
    pub fn predict(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        if points.ncols() != self.n_inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_inputs(),
                got: points.ncols(),
            });
        }
        Ok(self.forward(points).pop().unwrap())
    }

    /// Argmax of the class scores at `x` (0 for regression).
    pub fn predicted_class(&self, x: ArrayView1<f64>) -> Result<usize> {
        let scores = self.predict(x.insert_axis(Axis(0)))?;
        Ok(argmax(scores.row(0)))
    }

    /// One output column as a scalar function, the form surrogates regress on.
    pub fn output_column(&self, column: usize, points: ArrayView2<f64>) -> Result<Array1<f64>> {
        if column >= self.n_outputs() {
            return Err(Error::invalid(format!("output column {column} out of range")));
        }
        Ok(self.predict(points)?.column(column).to_owned())
    }

    /// Activations of every layer; element 0 is the input.
    fn forward(&self, points: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(points.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights.t()) + &layer.bias;
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelDoc>(text)?.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

pub(crate) fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and its gradient with respect to the network output.
fn loss_and_grad(out: &Array2<f64>, targets: &Array2<f64>, task: Task) -> (f64, Array2<f64>) {
    let m = out.nrows() as f64;
    match task {
        Task::Regression => {
            let diff = out - targets;
            let loss = diff.mapv(|v| v * v).sum() / m;
            (loss, diff * (2.0 / m))
        }
        Task::Classification { .. } => {
            let mut grad = out.clone();
            let mut loss = 0.0;
            for (mut g, t) in grad.outer_iter_mut().zip(targets.outer_iter()) {
                let max = g.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                g.mapv_inplace(|v| (v - max).exp());
                let z = g.sum();
                g /= z;
                let class = argmax(t);
                loss -= g[class].max(f64::MIN_POSITIVE).ln();
                g[class] -= 1.0;
            }
            (loss / m, grad / m)
        }
    }
}

/// Trains an MLP on standardized features. Regression targets are z-scored
/// for training and the scaling is folded back into the output layer, so
/// the returned model predicts in the original target units.
pub fn mlp_train(train: &Dataset, hidden_sizes: &[usize], config: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let task = train.task();
    let mut model = MlpModel::initialize(train.n_features(), hidden_sizes, task, config.seed)?;
    let x = train.features();
    let n = train.n_rows();

    let (targets, target_shift, target_scale) = match task {
        Task::Regression => {
            let y = train.targets();
            let mean = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            let t = Array2::from_shape_fn((n, 1), |(i, _)| (y[i] - mean) / scale);
            (t, mean, scale)
        }
        Task::Classification { n_classes } => {
            let mut t = Array2::zeros((n, n_classes));
            for (i, &label) in train.targets().iter().enumerate() {
                t[[i, label as usize]] = 1.0;
            }
            (t, 0.0, 1.0)
        }
    };

    let full_loss = |m: &MlpModel| loss_and_grad(m.forward(x).last().unwrap(), &targets, task).0;
    let initial_loss = full_loss(&model);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), batch);
            let tb = targets.select(Axis(0), batch);
            let acts = model.forward(xb.view());
            let (_, mut delta) = loss_and_grad(acts.last().unwrap(), &tb, task);
            for li in (0..model.layers.len()).rev() {
                let grad_w = delta.t().dot(&acts[li]);
                let grad_b = delta.sum_axis(Axis(0));
                if li > 0 {
                    let mut back = delta.dot(&model.layers[li].weights);
                    back.zip_mut_with(&acts[li], |g, &a| {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    delta = back;
                }
                let layer = &mut model.layers[li];
                layer.weights.scaled_add(-config.learning_rate, &grad_w);
                layer.bias.scaled_add(-config.learning_rate, &grad_b);
            }
        }
        let loss = full_loss(&model);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {epoch}; lower the learning rate"
            )));
        }
        trace.push(loss);
    }

    if let Task::Regression = task {
        let last = model.layers.last_mut().unwrap();
        last.weights *= target_scale;
        last.bias.mapv_inplace(|b| b * target_scale + target_shift);
    }

    Ok((
        model,
        TrainReport {
            initial_loss,
            loss_trace: trace,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    /// row-major
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    layer_sizes: Vec<usize>,
    activation: String,
    task: Task,
    layers: Vec<LayerDoc>,
}

impl From<&MlpModel> for ModelDoc {
    fn from(m: &MlpModel) -> Self {
        ModelDoc {
            layer_sizes: m.layer_sizes(),
            activation: "relu".into(),
            task: m.task,
            layers: m
                .layers
                .iter()
                .map(|l| LayerDoc {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ModelDoc> for MlpModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        if doc.activation != "relu" {
            return Err(Error::invalid(format!("unsupported activation `{}`", doc.activation)));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.rows, l.cols), l.weights)
                    .map_err(|e| Error::invalid(e.to_string()))?;
                Ok(DenseLayer {
                    weights,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = MlpModel::from_layers(layers, doc.task)?;
        if model.layer_sizes() != doc.layer_sizes {
            return Err(Error::invalid("layer_sizes disagree with the weight arrays"));
        }
        Ok(model)
    }
}

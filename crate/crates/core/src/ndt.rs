//! Neural decision trees.
//!
//! A fitted [`DecisionTree`] with `K` leaves is encoded as a three-layer
//! network:
//!
//! * layer 1 (`K-1` units): one unit per split, `z_k = act(x[j_k] - alpha_k)`;
//! * layer 2 (`K` units): one unit per leaf, connected with weight `+1`/`-1`
//!   to every split on its path (right/left branch), bias `1/2 - l` where
//!   `l` is the path length;
//! * output: `W_out[k'] = value[k'] / 2`, `b_out = sum_k' value[k'] / 2`.
//!
//! With the sign activation `act(u) = 2*[u >= 0] - 1` (hard mode) the
//! network reproduces the tree exactly. Soft mode swaps in `tanh(gamma1 u)`
//! and `tanh(gamma2 u)`, which makes the network smooth in both its inputs
//! and its parameters.
//!
//! The commonly quoted leaf bias `-(l - 1)/2` gives a leaf whose path
//! disagrees in exactly one split a pre-activation of `(l - 3)/2`, i.e. `0`
//! for `l = 3`, so two leaf units fire. `1/2 - l` leaves the reached leaf at
//! `+1/2` and every other leaf at `-3/2` or below. [`LeafBias::Published`]
//! keeps the other form available for comparison.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{DecisionTree, Node};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LeafBias {
    /// `1/2 - l`
    #[default]
    Corrected,
    /// `-(l - 1)/2`
    Published,
}

impl LeafBias {
    pub fn value(self, path_len: usize) -> f64 {
        let l = path_len as f64;
        match self {
            LeafBias::Corrected => 0.5 - l,
            LeafBias::Published => -0.5 * (l - 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdtParams {
    /// `(K-1) × d`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `(K-1) × K`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// `K × C`
    pub wout: Array2<f64>,
    pub bout: Array1<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub mode: Mode,
}

/// Gradients with the same shapes as the corresponding [`NdtParams`] fields.
#[derive(Debug, Clone, PartialEq)]
pub struct NdtGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub wout: Array2<f64>,
    pub bout: Array1<f64>,
}

/// Builds the network encoding of `tree` (returned in soft mode).
pub fn convert_dt_to_ndt(tree: &DecisionTree, gamma1: f64, gamma2: f64) -> Result<NdtParams> {
    convert_with_bias(tree, gamma1, gamma2, LeafBias::Corrected)
}

pub fn convert_with_bias(tree: &DecisionTree, gamma1: f64, gamma2: f64, leaf_bias: LeafBias) -> Result<NdtParams> {
    check_gammas(gamma1, gamma2)?;
    let internals = tree.internal_nodes();
    let leaves = tree.leaves();
    if leaves.len() < 2 {
        return Err(Error::SingleLeafTree);
    }
    let (n_splits, n_leaves, d, c) = (internals.len(), leaves.len(), tree.n_features(), tree.n_outputs());
    let split_index = |node: usize| internals.iter().position(|&i| i == node).unwrap();

    let mut w1 = Array2::zeros((n_splits, d));
    let mut b1 = Array1::zeros(n_splits);
    for (k, &node) in internals.iter().enumerate() {
        if let Node::Internal { feature, threshold, .. } = tree.nodes()[node] {
            w1[[k, feature]] = 1.0;
            b1[k] = -threshold;
        }
    }

    let mut w2 = Array2::zeros((n_splits, n_leaves));
    let mut b2 = Array1::zeros(n_leaves);
    let mut wout = Array2::zeros((n_leaves, c));
    for (leaf_idx, &leaf) in leaves.iter().enumerate() {
        let path = tree.path_to(leaf);
        for step in &path {
            w2[[split_index(step.node), leaf_idx]] = if step.goes_right { 1.0 } else { -1.0 };
        }
        b2[leaf_idx] = leaf_bias.value(path.len());
        for (o, v) in tree.leaf_value(leaf).iter().enumerate() {
            wout[[leaf_idx, o]] = 0.5 * v;
        }
    }
    let bout = column_sums(&wout);

    Ok(NdtParams {
        w1,
        b1,
        w2,
        b2,
        wout,
        bout,
        gamma1,
        gamma2,
        mode: Mode::Soft,
    })
}

fn check_gammas(gamma1: f64, gamma2: f64) -> Result<()> {
    if !(gamma2 > 0.0 && gamma2.is_finite() && gamma1.is_finite()) {
        return Err(Error::invalid("gamma values must be positive and finite"));
    }
    if gamma1 < gamma2 {
        return Err(Error::invalid(format!(
            "gamma1 ({gamma1}) must be at least gamma2 ({gamma2})"
        )));
    }
    Ok(())
}

/// Sequential column sums. The output layer is evaluated as
/// `(v + 1) W_out + (b_out - 1ᵀ W_out)`; summing in the same fixed order as
/// the conversion makes the bias term exactly zero for an untouched
/// conversion, so hard mode returns leaf values bit for bit.
fn column_sums(m: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(m.ncols());
    for row in m.outer_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn sign(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Hidden activations kept for backpropagation.
struct Cache {
    z: Array2<f64>,
    v: Array2<f64>,
    out: Array2<f64>,
}

impl NdtParams {
    pub fn n_features(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_splits(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_leaves(&self) -> usize {
        self.w2.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.wout.ncols()
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_gammas(mut self, gamma1: f64, gamma2: f64) -> Result<Self> {
        check_gammas(gamma1, gamma2)?;
        self.gamma1 = gamma1;
        self.gamma2 = gamma2;
        Ok(self)
    }

    /// Re-expresses the leaf values relative to `reference` (one entry per
    /// output), so the network computes
    /// `reference + Σ_k (v_k + 1)(ȳ_k - reference) / 2`. Hard-mode outputs are
    /// unchanged up to rounding; in soft mode undecided leaf indicators then
    /// pull the output towards `reference` rather than towards zero.
    pub fn with_leaf_reference(mut self, reference: &[f64]) -> Result<Self> {
        if reference.len() != self.n_outputs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_outputs(),
                got: reference.len(),
            });
        }
        if reference.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("leaf reference".into()));
        }
        for mut row in self.wout.outer_iter_mut() {
            for (w, r) in row.iter_mut().zip(reference) {
                *w -= 0.5 * r;
            }
        }
        self.bout = column_sums(&self.wout);
        for (b, r) in self.bout.iter_mut().zip(reference) {
            *b += r;
        }
        Ok(self)
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.wout.len() + self.bout.len()
    }

    fn check_finite(&self) -> Result<()> {
        let finite = |a: &[f64]| a.iter().all(|v| v.is_finite());
        let ok = [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.wout.as_slice(),
            self.bout.as_slice(),
        ]
        .into_iter()
        .all(|s| s.is_some_and(finite));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("NDT parameter".into()))
        }
    }

    fn check_input(&self, points: &ArrayView2<f64>) -> Result<()> {
        if points.ncols() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got: points.ncols(),
            });
        }
        self.check_finite()
    }

    fn run(&self, points: ArrayView2<f64>) -> Cache {
        let mut z = points.dot(&self.w1.t()) + &self.b1;
        let mut v = match self.mode {
            Mode::Hard => {
                z.mapv_inplace(sign);
                z.dot(&self.w2) + &self.b2
            }
            Mode::Soft => {
                let g1 = self.gamma1;
                z.mapv_inplace(|u| (g1 * u).tanh());
                z.dot(&self.w2) + &self.b2
            }
        };
        match self.mode {
            Mode::Hard => v.mapv_inplace(sign),
            Mode::Soft => {
                let g2 = self.gamma2;
                v.mapv_inplace(|u| (g2 * u).tanh())
            }
        }
        let shift = &self.bout - &column_sums(&self.wout);
        let out = (&v + 1.0).dot(&self.wout) + &shift;
        Cache { z, v, out }
    }

    /// Network output, one row per point.
    pub fn forward(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&points)?;
        Ok(self.run(points).out)
    }

    /// Second-hidden-layer activations (the leaf indicators in hard mode).
    pub fn leaf_activations(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&points)?;
        Ok(self.run(points).v)
    }

    /// First-hidden-layer activations.
    pub fn split_activations(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&points)?;
        Ok(self.run(points).z)
    }

    /// Gradient of output `output` with respect to the input, for every
    /// point. Soft mode only.
    pub fn input_gradients(&self, points: ArrayView2<f64>, output: usize) -> Result<Array2<f64>> {
        if self.mode == Mode::Hard {
            return Err(Error::HardMode);
        }
        self.check_input(&points)?;
        if output >= self.n_outputs() {
            return Err(Error::invalid(format!("output {output} out of range")));
        }
        let cache = self.run(points);
        let m = points.nrows();
        // d out / d v is the selected column of W_out for every point
        let dv = Array2::from_shape_fn((m, self.n_leaves()), |(_, k)| self.wout[[k, output]]);
        let (_, _, dx) = self.backward_hidden(&cache, dv);
        Ok(dx)
    }

    /// Propagates `dL/dv` to `dL/du2`, `dL/du1` and `dL/dx`.
    fn backward_hidden(&self, cache: &Cache, mut dv: Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let g2 = self.gamma2;
        Zip::from(&mut dv).and(&cache.v).for_each(|d, &v| *d *= g2 * (1.0 - v * v));
        let du2 = dv;
        let mut du1 = du2.dot(&self.w2.t());
        let g1 = self.gamma1;
        Zip::from(&mut du1).and(&cache.z).for_each(|d, &z| *d *= g1 * (1.0 - z * z));
        let dx = du1.dot(&self.w1);
        (du2, du1, dx)
    }

    /// Weighted fidelity loss `sum_i w_i ||targets_i - g(x_i)||^2`.
    pub fn fidelity_loss(&self, points: ArrayView2<f64>, targets: ArrayView2<f64>, weights: &[f64]) -> Result<f64> {
        self.check_fit_inputs(&points, &targets, weights)?;
        let out = self.run(points).out;
        Ok(weighted_sq_error(&out, &targets, weights))
    }

    /// Fidelity loss and its gradient with respect to every parameter.
    /// Soft mode only.
    pub fn loss_and_grads(
        &self,
        points: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        weights: &[f64],
    ) -> Result<(f64, NdtGrads)> {
        if self.mode == Mode::Hard {
            return Err(Error::HardMode);
        }
        self.check_fit_inputs(&points, &targets, weights)?;
        let cache = self.run(points);
        let loss = weighted_sq_error(&cache.out, &targets, weights);

        let mut dout = &cache.out - &targets;
        for (mut row, &w) in dout.outer_iter_mut().zip(weights) {
            row *= 2.0 * w;
        }
        let wout = cache.v.t().dot(&dout);
        let bout = dout.sum_axis(Axis(0));
        let dv = dout.dot(&self.wout.t());
        let (du2, du1, _) = self.backward_hidden(&cache, dv);
        let grads = NdtGrads {
            w1: du1.t().dot(&points),
            b1: du1.sum_axis(Axis(0)),
            w2: cache.z.t().dot(&du2),
            b2: du2.sum_axis(Axis(0)),
            wout,
            bout,
        };
        Ok((loss, grads))
    }

    fn check_fit_inputs(&self, points: &ArrayView2<f64>, targets: &ArrayView2<f64>, weights: &[f64]) -> Result<()> {
        self.check_input(points)?;
        if targets.nrows() != points.nrows() || weights.len() != points.nrows() {
            return Err(Error::DimensionMismatch {
                expected: points.nrows(),
                got: targets.nrows().min(weights.len()),
            });
        }
        if targets.ncols() != self.n_outputs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_outputs(),
                got: targets.ncols(),
            });
        }
        Ok(())
    }

    fn step(&mut self, grads: &NdtGrads, scale: f64) {
        self.w1.scaled_add(-scale, &grads.w1);
        self.b1.scaled_add(-scale, &grads.b1);
        self.w2.scaled_add(-scale, &grads.w2);
        self.b2.scaled_add(-scale, &grads.b2);
        self.wout.scaled_add(-scale, &grads.wout);
        self.bout.scaled_add(-scale, &grads.bout);
    }

    /// All parameters flattened in field order (w1, b1, w2, b2, wout, bout).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.wout.iter());
        out.extend(self.bout.iter());
        out
    }

    /// Inverse of [`NdtParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.wout.iter_mut())
            .chain(self.bout.iter_mut())
        {
            *v = it.next().unwrap();
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let params: NdtParams = serde_json::from_str(text)?;
        check_gammas(params.gamma1, params.gamma2)?;
        Ok(params)
    }
}

impl NdtGrads {
    /// Flattened in the same order as [`NdtParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.wout.iter())
            .chain(self.bout.iter())
            .copied()
            .collect()
    }
}

fn weighted_sq_error(out: &Array2<f64>, targets: &ArrayView2<f64>, weights: &[f64]) -> f64 {
    out.outer_iter()
        .zip(targets.outer_iter())
        .zip(weights)
        .map(|((o, t), w)| w * o.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

/// Gradient of one output at a single point: the NDT explanation vector.
pub fn ndt_input_gradient(params: &NdtParams, x: ArrayView1<f64>, output: Option<usize>) -> Result<Vec<f64>> {
    let g = params.input_gradients(x.insert_axis(Axis(0)), output.unwrap_or(0))?;
    Ok(g.row(0).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Full-batch descent uses no randomness; the seed is carried for
    /// bookkeeping only.
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 0.01,
            epochs: 200,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

/// Update rule for fine-tuning. Both operate on the full-batch gradient of
/// the fidelity loss divided by the total weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Fixed-step gradient descent.
    Gd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    pub params: NdtParams,
    /// Loss before each epoch followed by the loss after the last one.
    pub loss_trace: Vec<f64>,
    pub diverged: bool,
}

impl FinetuneResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().unwrap()
    }
}

/// Full-batch descent on the weighted fidelity loss over every network
/// parameter. Updates use the gradient of the loss divided by the total
/// weight, so the step size does not depend on the neighbourhood size. On a non-finite loss the last finite parameters are
/// returned with `diverged` set.
pub fn ndt_finetune(
    params: &NdtParams,
    points: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    weights: &[f64],
    config: &FinetuneConfig,
) -> Result<FinetuneResult> {
    if params.mode == Mode::Hard {
        return Err(Error::HardMode);
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeights);
    }
    let scale = config.learning_rate / total;
    let mut adam = match config.optimizer {
        Optimizer::Adam => Some(AdamState::new(params.n_params())),
        Optimizer::Gd => None,
    };
    let mut current = params.clone();
    let mut last_good: Option<NdtParams> = None;
    let mut trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let loss = if current.check_finite().is_ok() {
            current.loss_and_grads(points, targets, weights).ok()
        } else {
            None
        };
        match loss {
            Some((loss, grads)) if loss.is_finite() => {
                trace.push(loss);
                if epoch == config.epochs {
                    break;
                }
                let mut next = current.clone();
                match adam.as_mut() {
                    None => next.step(&grads, scale),
                    Some(state) => {
                        let mut flat = next.to_flat();
                        state.update(&mut flat, &grads.to_flat(), config.learning_rate, total);
                        next.set_flat(&flat);
                    }
                }
                last_good = Some(std::mem::replace(&mut current, next));
            }
            _ => {
                return Ok(FinetuneResult {
                    params: last_good.unwrap_or_else(|| params.clone()),
                    loss_trace: trace,
                    diverged: true,
                })
            }
        }
    }
    Ok(FinetuneResult {
        params: current,
        loss_trace: trace,
        diverged: false,
    })
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, total_weight: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i] / total_weight;
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Hessian of one output at `x` by central differences of the analytic
/// gradient, symmetrised.
pub fn hessian_fd(params: &NdtParams, x: ArrayView1<f64>, output: usize, step: f64) -> Result<Array2<f64>> {
    let d = x.len();
    let mut probes = Array2::zeros((2 * d, d));
    for j in 0..d {
        probes.row_mut(2 * j).assign(&x);
        probes.row_mut(2 * j + 1).assign(&x);
        probes[[2 * j, j]] += step;
        probes[[2 * j + 1, j]] -= step;
    }
    let grads = params.input_gradients(probes.view(), output)?;
    let mut h = Array2::zeros((d, d));
    for j in 0..d {
        let col = (&grads.row(2 * j) - &grads.row(2 * j + 1)) / (2.0 * step);
        h.column_mut(j).assign(&col);
    }
    let sym = (&h + &h.t()) * 0.5;
    Ok(sym)
}

/// Step used for the finite-difference Hessian.
pub const HESSIAN_STEP: f64 = 1e-4;

/// `|g(x0 + s u) - q(s)|` for each scale `s`, where `q` is the quadratic
/// Taylor model of output `output` at `x0`.
pub fn taylor_residual_check(
    params: &NdtParams,
    x0: ArrayView1<f64>,
    direction: ArrayView1<f64>,
    h_scales: &[f64],
    output: usize,
) -> Result<Vec<f64>> {
    if params.mode == Mode::Hard {
        return Err(Error::HardMode);
    }
    if direction.len() != x0.len() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: direction.len(),
        });
    }
    let x0m = x0.insert_axis(Axis(0));
    let g0 = params.forward(x0m)?[[0, output]];
    let grad = params.input_gradients(x0m, output)?;
    let slope = grad.row(0).dot(&direction);
    let curvature = direction.dot(&hessian_fd(params, x0, output, HESSIAN_STEP)?.dot(&direction));
    let probes = Array2::from_shape_fn((h_scales.len(), x0.len()), |(i, j)| x0[j] + h_scales[i] * direction[j]);
    let values = params.forward(probes.view())?;
    Ok(h_scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if s == 0.0 {
                0.0
            } else {
                (values[[i, output]] - (g0 + s * slope + 0.5 * s * s * curvature)).abs()
            }
        })
        .collect())
}

/// Upper estimate of the Lipschitz constant of the explanation map on the
/// segment `[a, b]`: the largest Frobenius norm of the finite-difference
/// Hessian over `samples` evenly spaced points.
pub fn explanation_lipschitz_bound(
    params: &NdtParams,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    output: usize,
    samples: usize,
) -> Result<f64> {
    let mut bound: f64 = 0.0;
    for i in 0..=samples.max(1) {
        let t = i as f64 / samples.max(1) as f64;
        let x = &a * (1.0 - t) + &b * t;
        let h = hessian_fd(params, x.view(), output, HESSIAN_STEP)?;
        bound = bound.max(h.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(bound)
}

//! Local surrogate explanations: sample a Gaussian neighbourhood around an
//! instance, weight it with a proximity kernel, fit a linear model, a
//! decision tree or a neural decision tree to the black box on it, and read
//! off a feature-attribution vector.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blackbox::MlpModel;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::metrics::{fidelity_r2, SS_TOT_TOL};
use crate::ndt::{convert_dt_to_ndt, ndt_finetune, ndt_input_gradient, FinetuneConfig, NdtParams};
use crate::tree::{fit_weighted_cart, CartConfig, DecisionTree, TreeTargets};

/// Diagonal jitter added to the weighted covariance in least squares.
pub const RIDGE_JITTER: f64 = 1e-8;

/// Relative eigenvalue floor below which the least-squares design is
/// reported as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

const REFINE_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodConfig {
    pub n_samples: usize,
    /// Kernel width; `None` means `0.75 * sqrt(d)`.
    pub kernel_width: Option<f64>,
    /// Noise standard deviation as a multiple of each feature's stddev.
    pub perturb_scale: f64,
    pub seed: u64,
}

impl Default for NeighborhoodConfig {
    fn default() -> Self {
        NeighborhoodConfig {
            n_samples: 800,
            kernel_width: None,
            perturb_scale: 1.0,
            seed: 0,
        }
    }
}

impl NeighborhoodConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        NeighborhoodConfig { seed, ..self }
    }

    pub fn sigma(&self, d: usize) -> f64 {
        self.kernel_width.unwrap_or(0.75 * (d as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 10 {
            return Err(Error::invalid(format!("n_samples must be at least 10, got {}", self.n_samples)));
        }
        if let Some(s) = self.kernel_width {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("kernel width must be positive, got {s}")));
            }
        }
        if !(self.perturb_scale >= 0.0 && self.perturb_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "perturb_scale must be nonnegative, got {}",
                self.perturb_scale
            )));
        }
        Ok(())
    }
}

/// `n_samples` Gaussian perturbations of `x`; row i is
/// `x + perturb_scale * feature_scales ⊙ z_i` with `z_i` standard normal.
pub fn perturb(x: ArrayView1<f64>, feature_scales: &[f64], cfg: &NeighborhoodConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    if feature_scales.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: feature_scales.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = x.len();
    let mut out = Array2::zeros((cfg.n_samples, d));
    for mut row in out.outer_iter_mut() {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            row[j] = x[j] + cfg.perturb_scale * feature_scales[j] * z;
        }
    }
    Ok(out)
}

/// Gaussian proximity weights `exp(-|x - x'_i|^2 / sigma^2)`.
pub fn proximity_weights(points: ArrayView2<f64>, x: ArrayView1<f64>, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("kernel width must be positive, got {sigma}")));
    }
    if points.ncols() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: points.ncols(),
        });
    }
    let s2 = sigma * sigma;
    Ok(points
        .outer_iter()
        .map(|row| {
            let d2: f64 = row.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            (-d2 / s2).exp()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlsFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub rank_deficient: bool,
}

impl WlsFit {
    pub fn predict(&self, points: ArrayView2<f64>) -> Vec<f64> {
        points
            .outer_iter()
            .map(|row| self.intercept + row.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

/// Weighted least squares with intercept. The slope solves the weighted
/// normal equations on centred data, with [`RIDGE_JITTER`] added to the
/// diagonal of the weighted covariance.
pub fn weighted_least_squares(x: ArrayView2<f64>, y: &[f64], w: &[f64]) -> Result<WlsFit> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if w.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: w.len() });
    }
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let positive = w.iter().filter(|&&v| v > 0.0).count();
    if positive < d + 1 {
        return Err(Error::TooFewRows {
            needed: d + 1,
            got: positive,
        });
    }
    let total: f64 = w.iter().sum();
    let mut x_mean = vec![0.0; d];
    let mut y_mean = 0.0;
    for ((row, yi), wi) in x.outer_iter().zip(y).zip(w) {
        for j in 0..d {
            x_mean[j] += wi * row[j];
        }
        y_mean += wi * yi;
    }
    x_mean.iter_mut().for_each(|m| *m /= total);
    y_mean /= total;

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut centred = vec![0.0; d];
    for ((row, yi), wi) in x.outer_iter().zip(y).zip(w) {
        if *wi == 0.0 {
            continue;
        }
        for j in 0..d {
            centred[j] = row[j] - x_mean[j];
        }
        let wr = wi / total;
        for a in 0..d {
            rhs[a] += wr * centred[a] * (yi - y_mean);
            for b in 0..=a {
                cov[(a, b)] += wr * centred[a] * centred[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let max_eig = eig.iter().cloned().fold(0.0f64, f64::max);
    let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let rank_deficient = max_eig <= 0.0 || min_eig <= RANK_TOL * max_eig;

    let mut jittered = cov.clone();
    for a in 0..d {
        jittered[(a, a)] += RIDGE_JITTER;
    }
    let chol = jittered
        .cholesky()
        .ok_or_else(|| Error::NonFinite("least-squares normal matrix is not positive definite".into()))?;
    let mut beta = chol.solve(&rhs);
    // Iterative refinement against the unjittered system removes the ridge
    // bias on well-conditioned directions.
    for _ in 0..REFINE_STEPS {
        let residual = &rhs - &cov * &beta;
        beta += chol.solve(&residual);
    }
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    if !intercept.is_finite() || coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("least-squares solution".into()));
    }
    Ok(WlsFit {
        coefficients,
        intercept,
        rank_deficient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurrogateKind {
    #[serde(rename = "LR")]
    Linear,
    #[serde(rename = "DT")]
    Tree,
    #[serde(rename = "NDT")]
    Ndt,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 3] = [SurrogateKind::Linear, SurrogateKind::Tree, SurrogateKind::Ndt];

    pub fn label(self) -> &'static str {
        match self {
            SurrogateKind::Linear => "LR",
            SurrogateKind::Tree => "DT",
            SurrogateKind::Ndt => "NDT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LR" | "LINEAR" => Ok(SurrogateKind::Linear),
            "DT" | "TREE" => Ok(SurrogateKind::Tree),
            "NDT" => Ok(SurrogateKind::Ndt),
            _ => Err(Error::invalid(format!("unknown surrogate '{s}'"))),
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub cart: CartConfig,
    pub gamma1: f64,
    pub gamma2: f64,
    pub finetune: FinetuneConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            cart: CartConfig::default(),
            gamma1: 1.0,
            gamma2: 1.0,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationFlag {
    /// The black box is constant on the neighbourhood; fidelity is missing.
    DegenerateNeighborhood,
    /// The surrogate tree has a single leaf; the NDT explanation is the
    /// tree's importance vector.
    SingleLeafFallback,
    RankDeficient,
    FinetuneDiverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub instance: Vec<f64>,
    pub surrogate: SurrogateKind,
    pub vector: Vec<f64>,
    pub local_fidelity: Option<f64>,
    pub seed: u64,
    pub flags: Vec<ExplanationFlag>,
}

impl Explanation {
    pub fn has_flag(&self, flag: ExplanationFlag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Perturbed points, black-box values on them and their proximity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub points: Array2<f64>,
    pub f_vals: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Neighborhood {
    pub fn is_degenerate(&self) -> bool {
        let n = self.f_vals.len() as f64;
        let mean = self.f_vals.iter().sum::<f64>() / n;
        self.f_vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() < SS_TOT_TOL
    }
}

pub fn sample_neighborhood<F>(
    f: &F,
    x: ArrayView1<f64>,
    cfg: &NeighborhoodConfig,
    feature_scales: &[f64],
) -> Result<Neighborhood>
where
    F: Fn(ArrayView2<f64>) -> Result<Array1<f64>> + ?Sized,
{
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("instance to explain".into()));
    }
    let points = perturb(x, feature_scales, cfg)?;
    let f_vals = f(points.view())?;
    if f_vals.len() != points.nrows() {
        return Err(Error::DimensionMismatch {
            expected: points.nrows(),
            got: f_vals.len(),
        });
    }
    if f_vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("black-box output".into()));
    }
    let weights = proximity_weights(points.view(), x, cfg.sigma(x.len()))?;
    Ok(Neighborhood {
        points,
        f_vals: f_vals.to_vec(),
        weights,
    })
}

/// The NDT surrogate before and after fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct NdtFit {
    pub tree: DecisionTree,
    pub initial: NdtParams,
    pub tuned: NdtParams,
    pub diverged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn fit_tree(neigh: &Neighborhood, cart: &CartConfig) -> Result<DecisionTree> {
    fit_weighted_cart(
        neigh.points.view(),
        TreeTargets::Regression(&neigh.f_vals),
        &neigh.weights,
        cart,
    )
}

/// Fits the tree, converts it with leaf values taken relative to the
/// weighted mean black-box value, and fine-tunes it on the neighbourhood.
/// Fails with [`Error::SingleLeafTree`] when the tree does not split.
pub fn fit_ndt(neigh: &Neighborhood, scfg: &SurrogateConfig) -> Result<NdtFit> {
    let tree = fit_tree(neigh, &scfg.cart)?;
    fit_ndt_from_tree(neigh, tree, scfg)
}

pub fn fit_ndt_from_tree(neigh: &Neighborhood, tree: DecisionTree, scfg: &SurrogateConfig) -> Result<NdtFit> {
    let total: f64 = neigh.weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeights);
    }
    let mean = neigh.f_vals.iter().zip(&neigh.weights).map(|(f, w)| f * w).sum::<f64>() / total;
    let initial = convert_dt_to_ndt(&tree, scfg.gamma1, scfg.gamma2)?.with_leaf_reference(&[mean])?;
    let targets = Array1::from(neigh.f_vals.clone()).insert_axis(Axis(1));
    let result = ndt_finetune(
        &initial,
        neigh.points.view(),
        targets.view(),
        &neigh.weights,
        &scfg.finetune,
    )?;
    Ok(NdtFit {
        tree,
        initial,
        initial_loss: result.initial_loss(),
        final_loss: result.final_loss(),
        tuned: result.params,
        diverged: result.diverged,
    })
}

fn column0(a: Array2<f64>) -> Vec<f64> {
    a.column(0).to_vec()
}

/// Explains `x` with a surrogate fitted on an already sampled neighbourhood.
pub fn explain_neighborhood(
    neigh: &Neighborhood,
    x: ArrayView1<f64>,
    kind: SurrogateKind,
    scfg: &SurrogateConfig,
    seed: u64,
) -> Result<Explanation> {
    let d = x.len();
    let mut flags = Vec::new();
    let degenerate = neigh.is_degenerate();
    if degenerate {
        flags.push(ExplanationFlag::DegenerateNeighborhood);
    }
    let fidelity = |g: &[f64]| -> Result<Option<f64>> { fidelity_r2(&neigh.f_vals, g) };

    let (vector, local_fidelity) = match kind {
        SurrogateKind::Linear => {
            if degenerate {
                (vec![0.0; d], None)
            } else {
                let fit = weighted_least_squares(neigh.points.view(), &neigh.f_vals, &neigh.weights)?;
                if fit.rank_deficient {
                    flags.push(ExplanationFlag::RankDeficient);
                }
                let r2 = fidelity(&fit.predict(neigh.points.view()))?;
                (fit.coefficients, r2)
            }
        }
        SurrogateKind::Tree => {
            let tree = fit_tree(neigh, &scfg.cart)?;
            let r2 = fidelity(&column0(tree.predict(neigh.points.view())?))?;
            (tree.feature_importance().values, r2)
        }
        SurrogateKind::Ndt => {
            if degenerate {
                (vec![0.0; d], None)
            } else {
                let tree = fit_tree(neigh, &scfg.cart)?;
                if tree.n_leaves() < 2 {
                    flags.push(ExplanationFlag::SingleLeafFallback);
                    let r2 = fidelity(&column0(tree.predict(neigh.points.view())?))?;
                    (tree.feature_importance().values, r2)
                } else {
                    let fit = fit_ndt_from_tree(neigh, tree, scfg)?;
                    if fit.diverged {
                        flags.push(ExplanationFlag::FinetuneDiverged);
                    }
                    let r2 = fidelity(&column0(fit.tuned.forward(neigh.points.view())?))?;
                    (ndt_input_gradient(&fit.tuned, x, Some(0))?, r2)
                }
            }
        }
    };
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{kind} explanation vector")));
    }
    Ok(Explanation {
        instance: x.to_vec(),
        surrogate: kind,
        vector,
        local_fidelity,
        seed,
        flags,
    })
}

/// Full pipeline for one instance: perturb, query the black box, weight,
/// fit the surrogate and extract the explanation vector.
pub fn explain_instance<F>(
    f: &F,
    x: ArrayView1<f64>,
    kind: SurrogateKind,
    cfg: &NeighborhoodConfig,
    scfg: &SurrogateConfig,
    feature_scales: &[f64],
) -> Result<Explanation>
where
    F: Fn(ArrayView2<f64>) -> Result<Array1<f64>> + ?Sized,
{
    let neigh = sample_neighborhood(f, x, cfg, feature_scales)?;
    explain_neighborhood(&neigh, x, kind, scfg, cfg.seed)
}

/// Output column of `model` used as the scalar surrogate target when
/// explaining `x`: the only output for regression, the predicted class for
/// classification.
pub fn target_output(model: &MlpModel, x: ArrayView1<f64>) -> Result<usize> {
    match model.task() {
        Task::Regression => Ok(0),
        Task::Classification { .. } => model.predicted_class(x),
    }
}

/// Scalar black-box function for explaining `x` with `model`.
pub fn scalar_blackbox<'a>(
    model: &'a MlpModel,
    x: ArrayView1<f64>,
) -> Result<impl Fn(ArrayView2<f64>) -> Result<Array1<f64>> + Sync + use<'a>> {
    let column = target_output(model, x)?;
    Ok(move |points: ArrayView2<f64>| model.output_column(column, points))
}

//! Greedy weighted CART. Regression trees minimise weighted squared error,
//! classification trees weighted Gini impurity. Points with
//! `x[feature] >= threshold` go right, everything else goes left.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};

/// Relative slack used when comparing split gains, so that gains equal up to
/// rounding resolve to the lowest feature index and threshold.
const GAIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub enum TreeTargets<'a> {
    Regression(&'a [f64]),
    Classification { labels: &'a [usize], n_classes: usize },
}

impl TreeTargets<'_> {
    fn len(&self) -> usize {
        match self {
            TreeTargets::Regression(y) => y.len(),
            TreeTargets::Classification { labels, .. } => labels.len(),
        }
    }

    fn task(&self) -> Task {
        match self {
            TreeTargets::Regression(_) => Task::Regression,
            TreeTargets::Classification { n_classes, .. } => Task::Classification { n_classes: *n_classes },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartConfig {
    pub max_depth: usize,
    /// Minimum total sample weight on each side of a split.
    pub min_leaf_weight: f64,
}

impl Default for CartConfig {
    fn default() -> Self {
        CartConfig {
            max_depth: 4,
            min_leaf_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Weighted impurity removed by this split.
        gain: f64,
    },
    Leaf {
        /// Mean target (regression) or class distribution (classification).
        value: Vec<f64>,
        weight_mass: f64,
    },
}

/// One step on a root-to-leaf path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub node: usize,
    pub goes_right: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    root: usize,
    n_features: usize,
    task: Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImportance {
    pub values: Vec<f64>,
    /// Set for single-leaf trees, whose importance is reported as uniform.
    pub degenerate: bool,
}

impl DecisionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_outputs(&self) -> usize {
        self.task.n_outputs()
    }

    /// Ids of internal nodes in depth-first (pre-)order.
    pub fn internal_nodes(&self) -> Vec<usize> {
        self.preorder()
            .into_iter()
            .filter(|&i| matches!(self.nodes[i], Node::Internal { .. }))
            .collect()
    }

    /// Ids of leaves in depth-first order (left to right).
    pub fn leaves(&self) -> Vec<usize> {
        self.preorder()
            .into_iter()
            .filter(|&i| matches!(self.nodes[i], Node::Leaf { .. }))
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().len()
    }

    pub fn depth(&self) -> usize {
        self.leaves().iter().map(|&l| self.path_to(l).len()).max().unwrap_or(0)
    }

    fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            out.push(i);
            if let Node::Internal { left, right, .. } = self.nodes[i] {
                stack.push(right);
                stack.push(left);
            }
        }
        out
    }

    /// Internal nodes visited from the root to `leaf`, with the branch taken.
    pub fn path_to(&self, leaf: usize) -> Vec<PathStep> {
        fn walk(tree: &DecisionTree, node: usize, target: usize, path: &mut Vec<PathStep>) -> bool {
            if node == target {
                return true;
            }
            if let Node::Internal { left, right, .. } = tree.nodes[node] {
                for (child, goes_right) in [(left, false), (right, true)] {
                    path.push(PathStep { node, goes_right });
                    if walk(tree, child, target, path) {
                        return true;
                    }
                    path.pop();
                }
            }
            false
        }
        let mut path = Vec::new();
        walk(self, self.root, leaf, &mut path);
        path
    }

    /// Id of the leaf reached by `x`.
    pub fn leaf_of(&self, x: ArrayView1<f64>) -> usize {
        let mut i = self.root;
        loop {
            match &self.nodes[i] {
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] >= *threshold { *right } else { *left },
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn leaf_value(&self, leaf: usize) -> &[f64] {
        match &self.nodes[leaf] {
            Node::Leaf { value, .. } => value,
            Node::Internal { .. } => panic!("node {leaf} is not a leaf"),
        }
    }

    /// One row per point: the leaf mean (regression) or leaf class
    /// distribution (classification).
    pub fn predict(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        if points.ncols() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: points.ncols(),
            });
        }
        let mut out = Array2::zeros((points.nrows(), self.n_outputs()));
        for (x, mut row) in points.outer_iter().zip(out.outer_iter_mut()) {
            let leaf = self.leaf_of(x);
            row.assign(&ArrayView1::from(self.leaf_value(leaf)));
        }
        Ok(out)
    }

    /// Weighted impurity decrease per feature, normalised to sum to one.
    pub fn feature_importance(&self) -> FeatureImportance {
        let mut values = vec![0.0; self.n_features];
        for node in &self.nodes {
            if let Node::Internal { feature, gain, .. } = node {
                values[*feature] += gain;
            }
        }
        let total: f64 = values.iter().sum();
        if total > 0.0 {
            values.iter_mut().for_each(|v| *v /= total);
            FeatureImportance {
                values,
                degenerate: false,
            }
        } else {
            FeatureImportance {
                values: vec![1.0 / self.n_features as f64; self.n_features],
                degenerate: true,
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sufficient statistics of a set of weighted samples.
#[derive(Debug, Clone)]
enum Stats {
    Regression { w: f64, wy: f64 },
    Classification { w: f64, per_class: Vec<f64> },
}

impl Stats {
    fn empty(targets: &TreeTargets) -> Self {
        match targets {
            TreeTargets::Regression(_) => Stats::Regression { w: 0.0, wy: 0.0 },
            TreeTargets::Classification { n_classes, .. } => Stats::Classification {
                w: 0.0,
                per_class: vec![0.0; *n_classes],
            },
        }
    }

    fn add(&mut self, targets: &TreeTargets, i: usize, weight: f64) {
        match (self, targets) {
            (Stats::Regression { w, wy }, TreeTargets::Regression(y)) => {
                *w += weight;
                *wy += weight * y[i];
            }
            (Stats::Classification { w, per_class }, TreeTargets::Classification { labels, .. }) => {
                *w += weight;
                per_class[labels[i]] += weight;
            }
            _ => unreachable!(),
        }
    }

    fn weight(&self) -> f64 {
        match self {
            Stats::Regression { w, .. } | Stats::Classification { w, .. } => *w,
        }
    }

    fn leaf_value(&self) -> Vec<f64> {
        match self {
            Stats::Regression { w, wy } => vec![wy / w],
            Stats::Classification { w, per_class } => per_class.iter().map(|c| c / w).collect(),
        }
    }

    /// Weight times Gini impurity; only used for classification gains.
    fn gini_total(per_class: &[f64], w: f64) -> f64 {
        w - per_class.iter().map(|c| c * c).sum::<f64>() / w
    }

    fn split_gain(parent: &Stats, left: &Stats) -> f64 {
        match (parent, left) {
            (Stats::Regression { w, wy }, Stats::Regression { w: wl, wy: wyl }) => {
                let wr = w - wl;
                let (ml, mr) = (wyl / wl, (wy - wyl) / wr);
                // between-group sum of squares of a two-way partition
                wl * wr / w * (ml - mr).powi(2)
            }
            (
                Stats::Classification { w, per_class },
                Stats::Classification {
                    w: wl,
                    per_class: left_class,
                },
            ) => {
                let wr = w - wl;
                let right_class: Vec<f64> = per_class.iter().zip(left_class).map(|(p, l)| p - l).collect();
                Self::gini_total(per_class, *w)
                    - Self::gini_total(left_class, *wl)
                    - Self::gini_total(&right_class, wr)
            }
            _ => unreachable!(),
        }
    }
}

fn is_pure(targets: &TreeTargets, rows: &[usize]) -> bool {
    match targets {
        TreeTargets::Regression(y) => rows.iter().all(|&i| y[i] == y[rows[0]]),
        TreeTargets::Classification { labels, .. } => rows.iter().all(|&i| labels[i] == labels[rows[0]]),
    }
}

fn node_impurity(targets: &TreeTargets, rows: &[usize], weights: &[f64], stats: &Stats) -> f64 {
    match (targets, stats) {
        (TreeTargets::Regression(y), Stats::Regression { w, wy }) => {
            let mean = wy / w;
            rows.iter().map(|&i| weights[i] * (y[i] - mean).powi(2)).sum()
        }
        (TreeTargets::Classification { .. }, Stats::Classification { w, per_class }) => {
            Stats::gini_total(per_class, *w)
        }
        _ => unreachable!(),
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    targets: TreeTargets<'a>,
    weights: &'a [f64],
    config: CartConfig,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn stats(&self, rows: &[usize]) -> Stats {
        let mut s = Stats::empty(&self.targets);
        for &i in rows {
            s.add(&self.targets, i, self.weights[i]);
        }
        s
    }

    fn best_split(&self, rows: &[usize], parent: &Stats, impurity: f64) -> Option<Split> {
        let total_w = parent.weight();
        let mut best: Option<Split> = None;
        let mut sorted = rows.to_vec();
        for feature in 0..self.x.ncols() {
            let col = self.x.column(feature);
            sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            let mut left = Stats::empty(&self.targets);
            for pos in 0..sorted.len() - 1 {
                let i = sorted[pos];
                left.add(&self.targets, i, self.weights[i]);
                let (lo, hi) = (col[i], col[sorted[pos + 1]]);
                if lo == hi {
                    continue;
                }
                let wl = left.weight();
                let wr = total_w - wl;
                if wl < self.config.min_leaf_weight || wr < self.config.min_leaf_weight {
                    continue;
                }
                let gain = Stats::split_gain(parent, &left);
                let slack = GAIN_TOL * impurity;
                if gain > slack && best.as_ref().is_none_or(|b| gain > b.gain + slack) {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold <= lo {
                        // adjacent floats: the midpoint rounded onto the left value
                        threshold = hi;
                    }
                    best = Some(Split {
                        feature,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let stats = self.stats(&rows);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: stats.leaf_value(),
            weight_mass: stats.weight(),
        });
        if depth >= self.config.max_depth || rows.len() < 2 || is_pure(&self.targets, &rows) {
            return id;
        }
        let impurity = node_impurity(&self.targets, &rows, self.weights, &stats);
        let Some(split) = self.best_split(&rows, &stats, impurity) else {
            return id;
        };
        let (right_rows, left_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x[[i, split.feature]] >= split.threshold);
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[id] = Node::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            gain: split.gain,
        };
        id
    }
}

/// Fits a weighted CART. Rows with zero weight are ignored entirely, so
/// they cannot introduce split candidates.
pub fn fit_weighted_cart(
    x: ArrayView2<f64>,
    targets: TreeTargets,
    sample_weight: &[f64],
    config: &CartConfig,
) -> Result<DecisionTree> {
    let n = x.nrows();
    if n == 0 || x.ncols() == 0 {
        return Err(Error::invalid("empty training data"));
    }
    if targets.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len(),
        });
    }
    if sample_weight.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sample_weight.len(),
        });
    }
    if config.max_depth < 1 {
        return Err(Error::invalid("max_depth must be at least 1"));
    }
    if let Some(w) = sample_weight.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::invalid(format!("sample weight {w} is not a nonnegative number")));
    }
    if let TreeTargets::Classification { labels, n_classes } = targets {
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(Error::invalid("class label out of range"));
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| sample_weight[i] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::ZeroWeights);
    }
    let mut builder = Builder {
        x,
        targets,
        weights: sample_weight,
        config: *config,
        nodes: Vec::new(),
    };
    let root = builder.build(rows, 0);
    Ok(DecisionTree {
        nodes: builder.nodes,
        root,
        n_features: x.ncols(),
        task: targets.task(),
    })
}

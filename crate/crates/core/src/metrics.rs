//! Explanation-quality measures: local fidelity (R² of the surrogate against
//! the black box on the neighbourhood), stability (mean pairwise cosine of
//! repeated explanations of one instance) and regularity (mean cosine
//! between an instance's explanation and those of its nearest neighbours).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this total sum of squares the black box is treated as constant on
/// the neighbourhood and R² is undefined.
pub const SS_TOT_TOL: f64 = 1e-12;

/// Vectors with a smaller Euclidean norm count as zero in cosine similarity.
pub const ZERO_NORM_TOL: f64 = 1e-12;

/// Coefficient of determination of `g_vals` as predictions of `f_vals`.
/// `None` when `f_vals` is (numerically) constant.
pub fn fidelity_r2(f_vals: &[f64], g_vals: &[f64]) -> Result<Option<f64>> {
    if f_vals.len() != g_vals.len() {
        return Err(Error::DimensionMismatch {
            expected: f_vals.len(),
            got: g_vals.len(),
        });
    }
    if f_vals.len() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            got: f_vals.len(),
        });
    }
    let mean = f_vals.iter().sum::<f64>() / f_vals.len() as f64;
    let ss_tot: f64 = f_vals.iter().map(|f| (f - mean).powi(2)).sum();
    if ss_tot < SS_TOT_TOL {
        return Ok(None);
    }
    let ss_res: f64 = f_vals.iter().zip(g_vals).map(|(f, g)| (f - g).powi(2)).sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn is_zero_vector(a: &[f64]) -> bool {
    norm(a) < ZERO_NORM_TOL
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_flagged(a, b).0
}

/// Cosine similarity plus a flag telling whether a zero vector was involved.
pub fn cosine_flagged(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM_TOL || nb < ZERO_NORM_TOL {
        return (0.0, true);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb), false)
}

fn check_repeats(explanations: &[Vec<f64>]) -> Result<()> {
    if explanations.len() < 2 {
        return Err(Error::invalid("stability needs at least two repeats"));
    }
    let d = explanations[0].len();
    if let Some(e) = explanations.iter().find(|e| e.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: e.len() });
    }
    Ok(())
}

/// Cosine matrix of repeated explanations of one instance.
pub fn stability_matrix_of(explanations: &[Vec<f64>]) -> Result<Array2<f64>> {
    check_repeats(explanations)?;
    let r = explanations.len();
    let mut m = Array2::zeros((r, r));
    for i in 0..r {
        m[[i, i]] = cosine(&explanations[i], &explanations[i]);
        for j in i + 1..r {
            let c = cosine(&explanations[i], &explanations[j]);
            m[[i, j]] = c;
            m[[j, i]] = c;
        }
    }
    Ok(m)
}

/// Mean pairwise cosine over the `R(R-1)/2` pairs. `None` when every
/// explanation is a zero vector.
pub fn stability_of(explanations: &[Vec<f64>]) -> Result<Option<f64>> {
    check_repeats(explanations)?;
    if explanations.iter().all(|e| is_zero_vector(e)) {
        return Ok(None);
    }
    let r = explanations.len();
    let mut total = 0.0;
    for i in 0..r - 1 {
        for j in i + 1..r {
            total += cosine(&explanations[i], &explanations[j]);
        }
    }
    Ok(Some(total / (r * (r - 1) / 2) as f64))
}

/// Runs `explain_fn` with seeds `base_seed, base_seed + 1, ...` and collects
/// the explanation vectors.
pub fn repeated_explanations<F>(mut explain_fn: F, base_seed: u64, repeats: usize) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(u64) -> Result<Vec<f64>>,
{
    (0..repeats as u64).map(|r| explain_fn(base_seed + r)).collect()
}

pub fn stability<F>(explain_fn: F, base_seed: u64, repeats: usize) -> Result<Option<f64>>
where
    F: FnMut(u64) -> Result<Vec<f64>>,
{
    if repeats < 2 {
        return Err(Error::invalid("stability needs at least two repeats"));
    }
    stability_of(&repeated_explanations(explain_fn, base_seed, repeats)?)
}

pub fn stability_matrix<F>(explain_fn: F, base_seed: u64, repeats: usize) -> Result<Array2<f64>>
where
    F: FnMut(u64) -> Result<Vec<f64>>,
{
    if repeats < 2 {
        return Err(Error::invalid("stability needs at least two repeats"));
    }
    stability_matrix_of(&repeated_explanations(explain_fn, base_seed, repeats)?)
}

/// Indices of the `k` rows nearest to row `i` (Euclidean), excluding `i`
/// itself; equal distances go to the lower row index.
pub fn nearest_neighbors(features: ArrayView2<f64>, i: usize, k: usize) -> Vec<usize> {
    let x = features.row(i);
    let mut dists: Vec<(f64, usize)> = features
        .outer_iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, row)| {
            let d2: f64 = row.iter().zip(x.iter()).map(|(a, b)| (a - b).powi(2)).sum();
            (d2, j)
        })
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Per-instance regularity: mean cosine between each explanation and those
/// of its `k` nearest neighbours in `features`.
pub fn regularity_k(explanations: &[Vec<f64>], features: ArrayView2<f64>, k: usize) -> Result<Vec<f64>> {
    let n = explanations.len();
    if features.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: features.nrows(),
        });
    }
    if k < 1 || n <= k {
        return Err(Error::invalid(format!("regularity needs 1 <= k < n, got k={k}, n={n}")));
    }
    Ok((0..n)
        .map(|i| {
            let nn = nearest_neighbors(features, i, k);
            nn.iter().map(|&j| cosine(&explanations[i], &explanations[j])).sum::<f64>() / k as f64
        })
        .collect())
}

/// Mean, sample standard deviation and count of the non-missing values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n_used: usize,
}

pub fn average_metric(values: &[Option<f64>]) -> Result<Summary> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::AllMissing);
    }
    let n = present.len();
    let mean = present.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary { mean, std, n_used: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub instance: usize,
    pub fidelity: Option<f64>,
    pub stability: Option<f64>,
    pub regularity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_instance: Vec<InstanceMetrics>,
    pub fidelity: Option<Summary>,
    pub stability: Option<Summary>,
    pub regularity: Option<Summary>,
    /// Perturbations per neighbourhood.
    pub n_samples: usize,
    /// Stability repeats per instance.
    pub n_repeats: usize,
    pub k: usize,
}

impl MetricsReport {
    pub fn from_instances(per_instance: Vec<InstanceMetrics>, n_samples: usize, n_repeats: usize, k: usize) -> Self {
        let summarize = |pick: fn(&InstanceMetrics) -> Option<f64>| {
            let vals: Vec<Option<f64>> = per_instance.iter().map(pick).collect();
            average_metric(&vals).ok()
        };
        MetricsReport {
            fidelity: summarize(|m| m.fidelity),
            stability: summarize(|m| m.stability),
            regularity: summarize(|m| m.regularity),
            per_instance,
            n_samples,
            n_repeats,
            k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn fidelity_examples() {
        assert_eq!(fidelity_r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), Some(1.0));
        assert_eq!(fidelity_r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), Some(0.0));
        assert_eq!(fidelity_r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), Some(0.5));
        assert_eq!(fidelity_r2(&[4.0, 4.0, 4.0], &[4.0, 4.0, 4.0]).unwrap(), None);
        assert!(fidelity_r2(&[1.0], &[1.0]).is_err());
        assert!(fidelity_r2(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn worse_than_constant_is_negative() {
        let r2 = fidelity_r2(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().unwrap();
        assert_eq!(r2, -3.0);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[0.3, -2.0], &[0.3, -2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 5.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine_flagged(&[0.0, 0.0], &[1.0, 0.0]), (0.0, true));
    }

    #[test]
    fn stability_examples() {
        let fixed = |_seed: u64| Ok(vec![0.2, -1.0, 3.0]);
        assert!((stability(fixed, 0, 5).unwrap().unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(stability_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), Some(0.0));
        let s = stability_of(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap().unwrap();
        assert_eq!(s, 1.0 / 3.0);
        assert_eq!(stability_of(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap(), None);
        assert!(stability(fixed, 0, 1).is_err());
    }

    #[test]
    fn stability_uses_consecutive_seeds() {
        let mut seen = Vec::new();
        stability(
            |s| {
                seen.push(s);
                Ok(vec![1.0, s as f64])
            },
            10,
            4,
        )
        .unwrap();
        assert_eq!(seen, vec![10, 11, 12, 13]);
    }

    #[test]
    fn stability_matrix_properties() {
        let ones = stability_matrix(|_| Ok(vec![1.0, 2.0]), 0, 4).unwrap();
        assert!(ones.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let exps = vec![vec![1.0, 0.5, -0.2], vec![0.9, 0.7, 0.1], vec![-0.3, 1.0, 0.4], vec![1.0, 0.0, 0.0]];
        let m = stability_matrix_of(&exps).unwrap();
        let r = exps.len();
        let mut upper = 0.0;
        for i in 0..r {
            assert!((m[[i, i]] - 1.0).abs() < 1e-15);
            for j in 0..r {
                assert!((m[[i, j]] - m[[j, i]]).abs() < 1e-12);
                if j > i {
                    upper += m[[i, j]];
                }
            }
        }
        let mean_upper = upper / (r * (r - 1) / 2) as f64;
        assert!((mean_upper - stability_of(&exps).unwrap().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn regularity_examples() {
        let same = vec![vec![1.0, 2.0]; 4];
        let x = array![[0.0], [1.0], [3.0], [7.0]];
        assert!(regularity_k(&same, x.view(), 2).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(regularity_k(&ortho, array![[0.0], [1.0]].view(), 1).unwrap(), vec![0.0, 0.0]);

        let exps = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let scores = regularity_k(&exps, array![[0.0], [1.0], [10.0]].view(), 1).unwrap();
        assert_eq!(scores, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let x = array![[0.0], [1.0], [-1.0], [1.0]];
        assert_eq!(nearest_neighbors(x.view(), 0, 2), vec![1, 2]);
        assert_eq!(nearest_neighbors(x.view(), 1, 1), vec![3]);
    }

    #[test]
    fn regularity_rejects_bad_k() {
        let exps = vec![vec![1.0]; 3];
        let x = array![[0.0], [1.0], [2.0]];
        assert!(regularity_k(&exps, x.view(), 3).is_err());
        assert!(regularity_k(&exps, x.view(), 0).is_err());
    }

    #[test]
    fn average_examples() {
        let s = average_metric(&[Some(0.5), Some(0.5)]).unwrap();
        assert_eq!((s.mean, s.std, s.n_used), (0.5, 0.0, 2));
        let s = average_metric(&[Some(1.0), Some(0.0)]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert!((s.std - 0.5f64.sqrt()).abs() < 1e-15);
        let s = average_metric(&[Some(0.8), None, Some(0.6)]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert_eq!(s.n_used, 2);
        assert!(matches!(average_metric(&[None, None]), Err(Error::AllMissing)));
    }

    #[test]
    fn report_aggregates_match_instances() {
        let rows = vec![
            InstanceMetrics { instance: 0, fidelity: Some(0.9), stability: Some(1.0), regularity: Some(0.5) },
            InstanceMetrics { instance: 1, fidelity: None, stability: Some(0.8), regularity: Some(0.7) },
            InstanceMetrics { instance: 2, fidelity: Some(0.3), stability: Some(0.6), regularity: None },
        ];
        let report = MetricsReport::from_instances(rows, 800, 5, 2);
        assert!((report.fidelity.unwrap().mean - 0.6).abs() < 1e-12);
        assert_eq!(report.fidelity.unwrap().n_used, 2);
        assert!((report.stability.unwrap().mean - 0.8).abs() < 1e-12);
        assert_eq!(report.regularity.unwrap().n_used, 2);
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, d)
    }

    proptest! {
        #[test]
        fn r2_shift_invariant(f in vec_strategy(8), g in vec_strategy(8), c in -100.0f64..100.0) {
            let a = fidelity_r2(&f, &g).unwrap();
            let fs: Vec<f64> = f.iter().map(|v| v + c).collect();
            let gs: Vec<f64> = g.iter().map(|v| v + c).collect();
            let b = fidelity_r2(&fs, &gs).unwrap();
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn cosine_scale_invariant(a in vec_strategy(4), b in vec_strategy(4), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            let scaled_a: Vec<f64> = a.iter().map(|v| v * s).collect();
            let scaled_b: Vec<f64> = b.iter().map(|v| v * t).collect();
            let c = cosine(&a, &b);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
            if !is_zero_vector(&a) && !is_zero_vector(&b) {
                prop_assert!((c - cosine(&scaled_a, &scaled_b)).abs() < 1e-9);
            }
        }

        #[test]
        fn stability_permutation_invariant(exps in proptest::collection::vec(vec_strategy(3), 2..7)) {
            let mut rev = exps.clone();
            rev.reverse();
            let a = stability_of(&exps).unwrap();
            let b = stability_of(&rev).unwrap();
            match (a, b) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}

//! Regularized Mahalanobis metric over the labeled in-distribution rows.
//!
//! The covariance is pooled over all labeled rows (divisor n-1), shrunk by
//! `eps * I`, and factorized once; distances go through a single triangular
//! solve against the stored Cholesky factor rather than an explicit inverse.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::{EmbeddingSet, Role};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric estimation requires role labeled_id, got {0}")]
    WrongRole(&'static str),
    #[error("metric estimation requires at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("shrinkage must be finite and >= 0")]
    BadShrinkage,
    #[error(
        "covariance factorization failed even after shrinkage eps={eps:.3e} \
         (smallest eigenvalue estimate {min_eig:.3e}); the input is degenerate"
    )]
    NotPositiveDefinite { eps: f64, min_eig: f64 },
    #[error("vector length {got} does not match metric dim {dim}")]
    DimMismatch { dim: usize, got: usize },
}

/// Shrinkage intensity for the covariance regularizer `sigma + eps * I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shrinkage {
    /// `eps = 1e-3 * trace(sigma) / dim`.
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for Shrinkage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Shrinkage::Auto);
        }
        s.parse::<f64>()
            .map_err(|_| format!("shrinkage must be \"auto\" or a non-negative number, got {s:?}"))
            .and_then(|v| {
                if v.is_finite() && v >= 0.0 {
                    Ok(Shrinkage::Fixed(v))
                } else {
                    Err(format!("shrinkage must be finite and >= 0, got {v}"))
                }
            })
    }
}

/// Sample covariance of the labeled rows plus the lower-triangular factor of
/// the shrunk matrix. Immutable; distance evaluation is a pure function.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisMetric {
    dim: usize,
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
    eps: f64,
}

impl MahalanobisMetric {
    /// Builds the metric from an explicit covariance. Symmetrizes the input
    /// and factorizes `covariance + eps * I`.
    pub fn from_covariance(covariance: DMatrix<f64>, eps: f64) -> Result<Self, MetricError> {
        if !eps.is_finite() || eps < 0.0 {
            return Err(MetricError::BadShrinkage);
        }
        let dim = covariance.nrows();
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let mut shrunk = covariance.clone();
        for i in 0..dim {
            shrunk[(i, i)] += eps;
        }
        let factor = match shrunk.clone().cholesky() {
            Some(chol) => chol.unpack(),
            None => {
                let min_eig = shrunk
                    .symmetric_eigenvalues()
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                return Err(MetricError::NotPositiveDefinite { eps, min_eig });
            }
        };
        Ok(Self { dim, covariance, factor, eps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shrinkage(&self) -> f64 {
        self.eps
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Solves `L z = v` in place against the stored lower-triangular factor.
    /// The whitened vector's Euclidean norm is the Mahalanobis distance.
    pub fn whiten_in_place(&self, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim);
        let l = &self.factor;
        for i in 0..self.dim {
            let mut acc = v[i];
            for j in 0..i {
                acc -= l[(i, j)] * v[j];
            }
            v[i] = acc / l[(i, i)];
        }
    }

    /// `sqrt((x-y)^T (sigma + eps I)^{-1} (x-y))` via one triangular solve.
    /// Exactly symmetric in `x` and `y`: swapping them negates the solve
    /// output elementwise, which leaves the norm bit-identical.
    pub fn mahalanobis(&self, x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
        if x.len() != self.dim {
            return Err(MetricError::DimMismatch { dim: self.dim, got: x.len() });
        }
        if y.len() != self.dim {
            return Err(MetricError::DimMismatch { dim: self.dim, got: y.len() });
        }
        let mut diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        self.whiten_in_place(&mut diff);
        Ok(diff.iter().map(|z| z * z).sum::<f64>().sqrt())
    }
}

/// Pooled sample covariance (divisor n-1) of all labeled rows, shrunk and
/// factorized. `Shrinkage::Auto` resolves to `1e-3 * trace / dim`.
pub fn estimate_metric(
    labeled: &EmbeddingSet,
    shrinkage: Shrinkage,
) -> Result<MahalanobisMetric, MetricError> {
    if labeled.role() != Role::LabeledId {
        return Err(MetricError::WrongRole(labeled.role().as_str()));
    }
    let n = labeled.n_rows();
    if n < 2 {
        return Err(MetricError::TooFewRows(n));
    }
    let dim = labeled.dim();
    let mut mean = vec![0.0; dim];
    for row in labeled.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for row in labeled.rows() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eps = match shrinkage {
        Shrinkage::Fixed(e) if !(e.is_finite() && e >= 0.0) => return Err(MetricError::BadShrinkage),
        Shrinkage::Fixed(e) => e,
        Shrinkage::Auto => 1e-3 * cov.trace() / dim as f64,
    };
    MahalanobisMetric::from_covariance(cov, eps)
}

/// Per-class arithmetic means of the labeled rows, ordered by class index.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    dim: usize,
    classes: Vec<u32>,
    centers: Vec<DVector<f64>>,
}

impl ClassCenters {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.centers.len()
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub fn center_of(&self, class: u32) -> Option<&DVector<f64>> {
        self.classes.iter().position(|&c| c == class).map(|i| &self.centers[i])
    }
}

/// Mean of each class present in the labeled set.
pub fn class_centers(labeled: &EmbeddingSet) -> Result<ClassCenters, MetricError> {
    if labeled.role() != Role::LabeledId {
        return Err(MetricError::WrongRole(labeled.role().as_str()));
    }
    let labels = labeled.labels().expect("labeled_id sets carry labels");
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let dim = labeled.dim();
    let mut centers = vec![DVector::zeros(dim); classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (row, &label) in labeled.rows().zip(labels) {
        let slot = classes.binary_search(&label).expect("label present in class list");
        for (acc, v) in centers[slot].iter_mut().zip(row) {
            *acc += v;
        }
        counts[slot] += 1;
    }
    for (center, count) in centers.iter_mut().zip(&counts) {
        *center /= *count as f64;
    }
    Ok(ClassCenters { dim, classes, centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn labeled(rows: &[Vec<f64>], labels: Vec<u32>) -> EmbeddingSet {
        EmbeddingSet::from_rows(Role::LabeledId, rows, Some(labels)).unwrap()
    }

    #[test]
    fn hand_covariance_of_square_corners() {
        // rows {(0,0),(2,0),(0,2),(2,2)}: mean (1,1), divisor n-1 gives
        // diag(4/3, 4/3) with zero cross term.
        let set = labeled(
            &[vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]],
            vec![0, 0, 1, 1],
        );
        let metric = estimate_metric(&set, Shrinkage::Fixed(0.0)).unwrap();
        let cov = metric.covariance();
        assert!((cov[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
        assert!((cov[(1, 1)] - 4.0 / 3.0).abs() < 1e-15);
        assert!(cov[(0, 1)].abs() < 1e-15);
        assert!(cov[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn auto_shrinkage_fixes_rank_deficiency() {
        // 250 rows in dim 342: the sample covariance has rank < dim, but the
        // shrunk matrix must factorize.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> =
            (0..250).map(|_| (0..342).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let set = labeled(&rows, vec![0; 250]);
        assert!(matches!(
            estimate_metric(&set, Shrinkage::Fixed(0.0)),
            Err(MetricError::NotPositiveDefinite { .. })
        ));
        let metric = estimate_metric(&set, Shrinkage::Auto).unwrap();
        assert!(metric.shrinkage() > 0.0);
    }

    #[test]
    fn degenerate_repeated_row_fails_without_shrinkage() {
        let set = labeled(&vec![vec![1.5, -2.0]; 5], vec![0; 5]);
        let err = estimate_metric(&set, Shrinkage::Fixed(0.0)).unwrap_err();
        match err {
            MetricError::NotPositiveDefinite { min_eig, .. } => assert!(min_eig.abs() < 1e-12),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn identity_covariance_reduces_to_euclidean() {
        let metric = MahalanobisMetric::from_covariance(DMatrix::identity(2, 2), 0.0).unwrap();
        let d = metric.mahalanobis(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
        assert_eq!(metric.mahalanobis(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_covariance_analytic_distance() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let metric = MahalanobisMetric::from_covariance(cov, 0.0).unwrap();
        let d = metric.mahalanobis(&[0.0, 0.0], &[2.0, 0.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_is_exactly_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let dim = 6;
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose();
        let metric = MahalanobisMetric::from_covariance(cov, 1e-6).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let xy = metric.mahalanobis(&x, &y).unwrap();
            let yx = metric.mahalanobis(&y, &x).unwrap();
            assert_eq!(xy.to_bits(), yx.to_bits());
        }
    }

    #[test]
    fn covariance_scaling_law() {
        // Scaling sigma (and eps) by s divides every distance by sqrt(s).
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let dim = 5;
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose();
        let eps = 1e-3;
        let s = 4.5;
        let base = MahalanobisMetric::from_covariance(cov.clone(), eps).unwrap();
        let scaled = MahalanobisMetric::from_covariance(cov * s, eps * s).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let d0 = base.mahalanobis(&x, &y).unwrap();
            let d1 = scaled.mahalanobis(&x, &y).unwrap();
            let expected = d0 / s.sqrt();
            assert!((d1 - expected).abs() <= 1e-9 * expected.max(1e-12));
        }
    }

    #[test]
    fn centers_match_hand_means() {
        let set = labeled(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, 1.0]], vec![0, 0, 1]);
        let centers = class_centers(&set).unwrap();
        assert_eq!(centers.n_classes(), 2);
        assert_eq!(centers.center_of(0).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(centers.center_of(1).unwrap().as_slice(), &[5.0, 1.0]);
    }

    #[test]
    fn centers_match_independent_recomputation() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let k = 10;
        let per = 25;
        let dim = 7;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..k {
            for _ in 0..per {
                rows.push((0..dim).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>());
                labels.push(class as u32);
            }
        }
        let set = labeled(&rows, labels.clone());
        let centers = class_centers(&set).unwrap();
        for class in 0..k as u32 {
            // Second-pass oracle: sum matching stored rows, then divide.
            let members: Vec<&[f64]> = (0..set.n_rows())
                .filter(|&i| labels[i] == class)
                .map(|i| set.row(i))
                .collect();
            for d in 0..dim {
                let mean: f64 =
                    members.iter().map(|r| r[d]).sum::<f64>() / members.len() as f64;
                let got = centers.center_of(class).unwrap()[d];
                assert!((got - mean).abs() < 1e-12);
            }
        }
    }
}

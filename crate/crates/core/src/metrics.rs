//! Sample-quality metrics on raw coordinates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_FRECHET_DIMS: usize = 64;
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Feature vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub vectors: Array2<f64>,
}

impl FeatureSet {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature set".into(),
            });
        }
        Ok(FeatureSet { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.vectors.ncols()
    }

    /// Mean and unbiased (`n - 1`) covariance.
    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = self.vectors.dim();
        let m = DMatrix::from_row_iterator(n, d, self.vectors.iter().copied());
        let mean = m.row_mean().transpose();
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mean, cov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetReport {
    pub distance: f64,
    /// Ridge added to both covariances; 0 unless a fit was degenerate.
    pub ridge: f64,
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The cross term is `tr sqrt(A S_b A)` with `A = S_a^{1/2}`, which is
/// symmetric and shares its spectrum with `S_a S_b`. A covariance with an
/// eigenvalue below the ridge gets the ridge added to both fits.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<FrechetReport> {
    let d = a.dims();
    if b.dims() != d {
        return Err(Error::shape("feature sets differ in dimensionality"));
    }
    if d == 0 || d > MAX_FRECHET_DIMS {
        return Err(Error::invalid(format!(
            "frechet distance supports 1..={MAX_FRECHET_DIMS} dims, got {d}"
        )));
    }
    for (name, set) in [("first", a), ("second", b)] {
        if set.len() < d + 1 {
            return Err(Error::invalid(format!(
                "{name} set has {} points, covariance fitting needs >= {}",
                set.len(),
                d + 1
            )));
        }
    }
    let (mu_a, mut cov_a) = a.moments();
    let (mu_b, mut cov_b) = b.moments();
    let mut ridge = 0.0;
    if min_eigenvalue(&cov_a) < COVARIANCE_RIDGE || min_eigenvalue(&cov_b) < COVARIANCE_RIDGE {
        log::warn!("degenerate covariance; adding ridge {COVARIANCE_RIDGE:e}");
        ridge = COVARIANCE_RIDGE;
        let eye = DMatrix::<f64>::identity(d, d) * ridge;
        cov_a += &eye;
        cov_b += &eye;
    }
    let root_a = sym_sqrt(&cov_a);
    let mut cross = &root_a * &cov_b * &root_a;
    cross = (&cross + cross.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(cross)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = (mu_a - mu_b).norm_squared();
    let distance = diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(FrechetReport {
        distance: distance.max(0.0),
        ridge,
    })
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared distance from each point to its `k`-th nearest neighbor in the
/// same set, excluding itself.
fn kth_radii(set: ArrayView2<'_, f64>, k: usize) -> Vec<f64> {
    let n = set.nrows();
    let mut buf = Vec::with_capacity(n - 1);
    (0..n)
        .map(|i| {
            buf.clear();
            buf.extend(
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| sq_dist(set.row(i), set.row(j))),
            );
            let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Fraction of `queries` inside the union of balls around `reference` with
/// the given squared radii (boundary inclusive).
fn coverage(queries: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>, radii: &[f64]) -> f64 {
    let covered = queries
        .rows()
        .into_iter()
        .filter(|q| {
            reference
                .rows()
                .into_iter()
                .zip(radii)
                .any(|(r, &rad)| sq_dist(*q, r) <= rad)
        })
        .count();
    covered as f64 / queries.nrows() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub k: usize,
    pub n_real: usize,
    pub n_fake: usize,
}

/// k-NN manifold precision and recall, brute force, no outlier removal.
pub fn knn_precision_recall(
    real: &FeatureSet,
    fake: &FeatureSet,
    k: usize,
) -> Result<PrecisionRecall> {
    if real.dims() != fake.dims() {
        return Err(Error::shape("feature sets differ in dimensionality"));
    }
    if k == 0 || k >= real.len().min(fake.len()) {
        return Err(Error::invalid(format!(
            "k = {k} must satisfy 1 <= k < min(n_real, n_fake) = {}",
            real.len().min(fake.len())
        )));
    }
    let real_radii = kth_radii(real.vectors.view(), k);
    let fake_radii = kth_radii(fake.vectors.view(), k);
    Ok(PrecisionRecall {
        precision: coverage(fake.vectors.view(), real.vectors.view(), &real_radii),
        recall: coverage(real.vectors.view(), fake.vectors.view(), &fake_radii),
        k,
        n_real: real.len(),
        n_fake: fake.len(),
    })
}

/// Per-dimension z-scores of the sample mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentZ {
    pub mean_z: f64,
    pub var_z: f64,
}

/// Normal-theory z-scores: `se(mean) = sqrt(var / n)`,
/// `se(var) = var sqrt(2 / (n - 1))`.
pub fn moment_check(
    samples: ArrayView2<'_, f64>,
    analytic_mean: &[f64],
    analytic_var: &[f64],
) -> Result<Vec<MomentZ>> {
    let (n, d) = samples.dim();
    if n < 100 {
        return Err(Error::invalid(format!(
            "moment_check needs n >= 100, got {n}"
        )));
    }
    if analytic_mean.len() != d || analytic_var.len() != d {
        return Err(Error::shape("analytic moments must have one entry per dim"));
    }
    let nf = n as f64;
    Ok((0..d)
        .map(|j| {
            let col = samples.column(j);
            let mean = col.sum() / nf;
            let var = col.mapv(|v| (v - mean).powi(2)).sum() / (nf - 1.0);
            let (mu, sigma2) = (analytic_mean[j], analytic_var[j]);
            MomentZ {
                mean_z: (mean - mu) / (sigma2 / nf).sqrt(),
                var_z: (var - sigma2) / (sigma2 * (2.0 / (nf - 1.0)).sqrt()),
            }
        })
        .collect())
}

/// The record written by the `metrics` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub k: usize,
    pub covariance: &'static str,
    pub ridge: f64,
}

pub fn evaluate(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<MetricsRecord> {
    let fd = frechet_distance(real, fake)?;
    let pr = knn_precision_recall(real, fake, k)?;
    Ok(MetricsRecord {
        frechet: fd.distance,
        precision: pr.precision,
        recall: pr.recall,
        n_real: pr.n_real,
        n_fake: pr.n_fake,
        k,
        covariance: "unbiased (n-1)",
        ridge: fd.ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, mean: f64, std: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean + std * z
        });
        FeatureSet::new(x).unwrap()
    }

    /// Rescale a 1-D set to exact sample mean and unbiased variance.
    fn exact_1d(mean: f64, var: f64) -> FeatureSet {
        let base = gaussian(500, 1, 0.0, 1.0, 3).vectors;
        let n = base.nrows() as f64;
        let m = base.sum() / n;
        let s = (base.mapv(|v| (v - m).powi(2)).sum() / (n - 1.0)).sqrt();
        FeatureSet::new(base.mapv(|v| mean + var.sqrt() * (v - m) / s)).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = gaussian(300, 3, 0.2, 1.5, 1);
        assert!(frechet_distance(&a, &a).unwrap().distance < 1e-8);
    }

    #[test]
    fn one_dimensional_closed_forms() {
        let fd = frechet_distance(&exact_1d(0.0, 1.0), &exact_1d(1.0, 1.0)).unwrap();
        assert!((fd.distance - 1.0).abs() < 1e-9, "{}", fd.distance);
        let fd = frechet_distance(&exact_1d(0.0, 4.0), &exact_1d(0.0, 1.0)).unwrap();
        assert!((fd.distance - 1.0).abs() < 1e-9, "{}", fd.distance);
    }

    #[test]
    fn frechet_rejects_too_few_points_and_ridges_degenerate_fits() {
        let few = FeatureSet::new(Array2::zeros((3, 3))).unwrap();
        assert!(frechet_distance(&few, &few).is_err());
        let mut flat = gaussian(50, 2, 0.0, 1.0, 4).vectors;
        flat.column_mut(1).fill(0.5);
        let flat = FeatureSet::new(flat).unwrap();
        let fd = frechet_distance(&flat, &gaussian(50, 2, 0.0, 1.0, 5)).unwrap();
        assert_eq!(fd.ridge, COVARIANCE_RIDGE);
        assert!(fd.distance.is_finite());
    }

    #[test]
    fn identical_sets_have_full_precision_and_recall() {
        let a = gaussian(200, 2, 0.0, 1.0, 6);
        let pr = knn_precision_recall(&a, &a, 5).unwrap();
        assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
    }

    #[test]
    fn far_away_sets_score_zero() {
        let a = gaussian(100, 2, 0.0, 1.0, 7);
        let b = FeatureSet::new(a.vectors.mapv(|v| v + 1e6)).unwrap();
        let pr = knn_precision_recall(&a, &b, 5).unwrap();
        assert_eq!((pr.precision, pr.recall), (0.0, 0.0));
    }

    #[test]
    fn planted_line_configuration() {
        // Real: 0..9 on a line; fake: 0..4. Fake k-NN radii are 1 (k=1) and
        // [2, 1, 1, 1, 2] (k=2), so recall covers reals 0..=5 and 0..=6.
        let real = FeatureSet::new(Array2::from_shape_fn((10, 1), |(i, _)| i as f64)).unwrap();
        let fake = FeatureSet::new(Array2::from_shape_fn((5, 1), |(i, _)| i as f64)).unwrap();
        let k1 = knn_precision_recall(&real, &fake, 1).unwrap();
        assert_eq!((k1.precision, k1.recall), (1.0, 0.6));
        let k2 = knn_precision_recall(&real, &fake, 2).unwrap();
        assert_eq!((k2.precision, k2.recall), (1.0, 0.7));
    }

    #[test]
    fn knn_rejects_bad_k() {
        let a = gaussian(10, 2, 0.0, 1.0, 8);
        assert!(knn_precision_recall(&a, &a, 0).is_err());
        assert!(knn_precision_recall(&a, &a, 10).is_err());
    }

    #[test]
    fn moment_check_calibration_and_shifts() {
        let n = 100_000;
        let a = gaussian(n, 2, 1.0, 2.0, 9);
        for z in moment_check(a.vectors.view(), &[1.0, 1.0], &[4.0, 4.0]).unwrap() {
            assert!(z.mean_z.abs() < 4.0 && z.var_z.abs() < 4.0);
        }
        // Shift by exactly 10 standard errors of the mean.
        let se = (4.0 / n as f64).sqrt();
        let shifted = a.vectors.mapv(|v| v + 10.0 * se);
        let base = moment_check(a.vectors.view(), &[1.0, 1.0], &[4.0, 4.0]).unwrap();
        let moved = moment_check(shifted.view(), &[1.0, 1.0], &[4.0, 4.0]).unwrap();
        for (b, m) in base.iter().zip(&moved) {
            assert!((m.mean_z - b.mean_z - 10.0).abs() < 1e-6);
        }
        let squeezed = a.vectors.mapv(|v| 1.0 + (v - 1.0) / 2f64.sqrt());
        for z in moment_check(squeezed.view(), &[1.0, 1.0], &[4.0, 4.0]).unwrap() {
            assert!(z.var_z < -50.0);
        }
    }

    #[test]
    fn record_serializes_in_field_order() {
        let a = gaussian(50, 2, 0.0, 1.0, 10);
        let b = gaussian(60, 2, 0.5, 1.0, 11);
        let json = serde_json::to_string(&evaluate(&a, &b, 5).unwrap()).unwrap();
        let keys = ["frechet", "precision", "recall", "n_real", "n_fake", "k"];
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| json.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{json}");
    }

    fn rotate(x: &Array2<f64>, angle: f64, shift: (f64, f64)) -> Array2<f64> {
        let (c, s) = (angle.cos(), angle.sin());
        Array2::from_shape_fn(x.dim(), |(i, j)| {
            let (u, v) = (x[[i, 0]], x[[i, 1]]);
            if j == 0 {
                c * u - s * v + shift.0
            } else {
                s * u + c * v + shift.1
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn frechet_is_symmetric(seed in 0u64..1000, shift in -3.0f64..3.0, std in 0.2f64..3.0) {
            let a = gaussian(80, 3, 0.0, 1.0, seed);
            let b = gaussian(90, 3, shift, std, seed + 1);
            let ab = frechet_distance(&a, &b).unwrap().distance;
            let ba = frechet_distance(&b, &a).unwrap().distance;
            prop_assert!((ab - ba).abs() < 1e-10 * ab.max(1.0));
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn precision_recall_bounded_and_rigid_invariant(
            seed in 0u64..1000,
            angle in 0.0f64..std::f64::consts::TAU,
            dx in -5.0f64..5.0,
            dy in -5.0f64..5.0,
        ) {
            // Rounding can only flip a point lying within ~1e-15 of a radius,
            // which continuous draws avoid.
            let real = gaussian(60, 2, 0.0, 1.0, seed);
            let fake = gaussian(50, 2, 0.4, 0.8, seed + 7);
            let pr = knn_precision_recall(&real, &fake, 3).unwrap();
            prop_assert!((0.0..=1.0).contains(&pr.precision));
            prop_assert!((0.0..=1.0).contains(&pr.recall));
            let r2 = FeatureSet::new(rotate(&real.vectors, angle, (dx, dy))).unwrap();
            let f2 = FeatureSet::new(rotate(&fake.vectors, angle, (dx, dy))).unwrap();
            let moved = knn_precision_recall(&r2, &f2, 3).unwrap();
            prop_assert_eq!((pr.precision, pr.recall), (moved.precision, moved.recall));
        }
    }
}

//! Datasets with analytic ground truth, plus the batch type shared by the
//! rest of the crate.

use std::f64::consts::{LN_2, PI};
use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gaussian::lattice_index;
use crate::io;
use crate::rng::{stream, Stream};

/// Rows of samples, optionally with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    pub x: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl DataBatch {
    pub fn unlabeled(x: Array2<f64>) -> Self {
        DataBatch {
            x,
            labels: None,
            num_classes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "data batch".into(),
            });
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.x.nrows() {
                return Err(Error::shape("one label per row required"));
            }
            if let Some(&bad) = labels.iter().find(|&&c| c >= self.num_classes) {
                return Err(Error::invalid(format!(
                    "label {bad} >= num_classes {}",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dims(&self) -> usize {
        self.x.ncols()
    }

    /// Rows at `indices`, labels included.
    pub fn select(&self, indices: &[usize]) -> DataBatch {
        let dims = self.dims();
        let mut x = Array2::zeros((indices.len(), dims));
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r).assign(&self.x.row(i));
        }
        DataBatch {
            x,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// True when every value sits on the 256-level pixel lattice.
    pub fn is_on_lattice(&self) -> bool {
        self.x.iter().all(|&v| lattice_index(v).is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    AnalyticGaussian {
        mu0: f64,
        var0: f64,
        dims: usize,
    },
    GaussianMixture {
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        var: f64,
    },
    /// Uniform on the dark cells of a 4x4 board over `[-2, 2]^2`.
    Checkerboard,
    /// Grayscale tiles of `side x side` cut from a binary PGM grid.
    ImageFile {
        path: PathBuf,
        side: usize,
        channels: usize,
    },
}

impl DatasetKind {
    /// `components` centers evenly spaced on a circle.
    pub fn ring_mixture(components: usize, radius: f64, var: f64) -> Self {
        let centers = (0..components)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / components as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        DatasetKind::GaussianMixture {
            centers,
            weights: vec![1.0 / components as f64; components],
            var,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, DatasetKind::ImageFile { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

/// Closed-form log-density of an analytic dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticDensity {
    Gaussian {
        mu0: Vec<f64>,
        var0: Vec<f64>,
    },
    Mixture {
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        var: f64,
    },
    Checkerboard,
}

impl AnalyticDensity {
    /// Log-density in nats.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            AnalyticDensity::Gaussian { mu0, var0 } => x
                .iter()
                .zip(mu0.iter().zip(var0))
                .map(|(xi, (m, v))| -0.5 * ((2.0 * PI * v).ln() + (xi - m).powi(2) / v))
                .sum(),
            AnalyticDensity::Mixture {
                centers,
                weights,
                var,
            } => {
                let d = x.len() as f64;
                let terms: Vec<f64> = centers
                    .iter()
                    .zip(weights)
                    .map(|(c, w)| {
                        let sq: f64 = x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                        w.ln() - 0.5 * (d * (2.0 * PI * var).ln() + sq / var)
                    })
                    .collect();
                let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
            }
            AnalyticDensity::Checkerboard => {
                if checker_cell_is_dark(x[0], x[1]) {
                    -(8.0f64).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Mean negative log-density in nats per dimension.
    pub fn nll_nats_per_dim(&self, data: &Array2<f64>) -> f64 {
        let total: f64 = data
            .rows()
            .into_iter()
            .map(|r| -self.log_density(r.as_slice().expect("contiguous row")))
            .sum();
        total / (data.nrows() as f64 * data.ncols() as f64)
    }

    pub fn nll_bits_per_dim(&self, data: &Array2<f64>) -> f64 {
        self.nll_nats_per_dim(data) / LN_2
    }
}

fn checker_cell_is_dark(x: f64, y: f64) -> bool {
    if !(-2.0..2.0).contains(&x) || !(-2.0..2.0).contains(&y) {
        return false;
    }
    let (i, j) = ((x + 2.0).floor() as i64, (y + 2.0).floor() as i64);
    (i + j) % 2 == 0
}

/// Train and eval splits plus the analytic density when one exists.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DataBatch,
    pub eval: DataBatch,
    pub density: Option<AnalyticDensity>,
}

/// Draw the dataset. Deterministic in `spec.seed`; train and eval use
/// separate streams.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    let mut train_rng = stream(spec.seed, Stream::TrainData);
    let mut eval_rng = stream(spec.seed, Stream::EvalData);
    match &spec.kind {
        DatasetKind::AnalyticGaussian { mu0, var0, dims } => {
            if *dims == 0 || !(*var0 > 0.0) {
                return Err(Error::invalid(
                    "analytic gaussian needs dims >= 1, var0 > 0",
                ));
            }
            let draw = |n: usize, rng: &mut dyn rand::RngCore| {
                let x = Array2::from_shape_fn((n, *dims), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu0 + var0.sqrt() * z
                });
                DataBatch::unlabeled(x)
            };
            Ok(Dataset {
                train: draw(spec.n_train, &mut train_rng),
                eval: draw(spec.n_eval, &mut eval_rng),
                density: Some(AnalyticDensity::Gaussian {
                    mu0: vec![*mu0; *dims],
                    var0: vec![*var0; *dims],
                }),
            })
        }
        DatasetKind::GaussianMixture {
            centers,
            weights,
            var,
        } => {
            if centers.is_empty() || centers.len() != weights.len() {
                return Err(Error::invalid("mixture needs one weight per center"));
            }
            let dims = centers[0].len();
            if dims == 0 || centers.iter().any(|c| c.len() != dims) {
                return Err(Error::invalid(
                    "mixture centers must share a dimensionality",
                ));
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
                return Err(Error::invalid(format!(
                    "mixture weights must be non-negative and sum to 1, got {sum}"
                )));
            }
            if !(*var > 0.0) {
                return Err(Error::invalid("mixture variance must be > 0"));
            }
            let draw = |n: usize, rng: &mut dyn rand::RngCore| {
                let mut x = Array2::zeros((n, dims));
                let mut labels = Vec::with_capacity(n);
                for i in 0..n {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut k = weights.len() - 1;
                    for (j, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            k = j;
                            break;
                        }
                    }
                    labels.push(k);
                    for d in 0..dims {
                        let z: f64 = StandardNormal.sample(rng);
                        x[[i, d]] = centers[k][d] + var.sqrt() * z;
                    }
                }
                DataBatch {
                    x,
                    labels: Some(labels),
                    num_classes: weights.len(),
                }
            };
            Ok(Dataset {
                train: draw(spec.n_train, &mut train_rng),
                eval: draw(spec.n_eval, &mut eval_rng),
                density: Some(AnalyticDensity::Mixture {
                    centers: centers.clone(),
                    weights: weights.clone(),
                    var: *var,
                }),
            })
        }
        DatasetKind::Checkerboard => {
            let draw = |n: usize, rng: &mut dyn rand::RngCore| {
                let mut x = Array2::zeros((n, 2));
                for i in 0..n {
                    // 8 dark cells; pick one, then a uniform point inside it.
                    let cell = rng.random_range(0..8usize);
                    let (row, col) = (cell / 2, 2 * (cell % 2) + (cell / 2) % 2);
                    let (cx, cy) = (col as f64 - 2.0, row as f64 - 2.0);
                    let (ux, uy): (f64, f64) = (rng.random(), rng.random());
                    x[[i, 0]] = cx + ux;
                    x[[i, 1]] = cy + uy;
                }
                DataBatch::unlabeled(x)
            };
            Ok(Dataset {
                train: draw(spec.n_train, &mut train_rng),
                eval: draw(spec.n_eval, &mut eval_rng),
                density: Some(AnalyticDensity::Checkerboard),
            })
        }
        DatasetKind::ImageFile {
            path,
            side,
            channels,
        } => {
            if *channels != 1 {
                return Err(Error::invalid("only single-channel images are supported"));
            }
            if *side == 0 || *side > 8 {
                return Err(Error::invalid("image side must be in 1..=8"));
            }
            let tiles = io::read_pgm_tiles(path, *side)?;
            let needed = spec.n_train + spec.n_eval;
            if tiles.nrows() < needed {
                return Err(Error::invalid(format!(
                    "{} holds {} tiles, {needed} requested",
                    path.display(),
                    tiles.nrows()
                )));
            }
            let train: Vec<usize> = (0..spec.n_train).collect();
            let eval: Vec<usize> = (spec.n_train..needed).collect();
            let all = DataBatch::unlabeled(tiles);
            Ok(Dataset {
                train: all.select(&train),
                eval: all.select(&eval),
                density: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gaussian_moments() {
        let spec = DatasetSpec {
            kind: DatasetKind::AnalyticGaussian {
                mu0: 0.0,
                var0: 1.0,
                dims: 2,
            },
            n_train: 100_000,
            n_eval: 10,
            seed: 3,
        };
        let ds = generate(&spec).unwrap();
        let n = ds.train.len() as f64;
        for d in 0..2 {
            let col = ds.train.x.column(d);
            let mean = col.sum() / n;
            let var = col.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0);
            assert!(mean.abs() < 4.0 / n.sqrt());
            assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
        }
    }

    #[test]
    fn ring_mixture_samples_stay_near_a_center() {
        // Radius 0.5 is 5 sigma per axis; the chi-square(2) tail beyond it
        // is exp(-12.5) ~ 3.7e-6 per point.
        let spec = DatasetSpec {
            kind: DatasetKind::ring_mixture(8, 2.0, 0.01),
            n_train: 20_000,
            n_eval: 0,
            seed: 1,
        };
        let ds = generate(&spec).unwrap();
        let centers = match &spec.kind {
            DatasetKind::GaussianMixture { centers, .. } => centers.clone(),
            _ => unreachable!(),
        };
        let near = ds
            .train
            .x
            .rows()
            .into_iter()
            .filter(|r| {
                centers
                    .iter()
                    .any(|c| ((r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2)).sqrt() < 0.5)
            })
            .count();
        assert!(near as f64 / 20_000.0 > 0.999);
        ds.train.validate().unwrap();
    }

    #[test]
    fn same_seed_same_data() {
        let spec = DatasetSpec {
            kind: DatasetKind::Checkerboard,
            n_train: 500,
            n_eval: 50,
            seed: 9,
        };
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        let density = a.density.unwrap();
        assert!(a
            .train
            .x
            .rows()
            .into_iter()
            .all(|r| density.log_density(&[r[0], r[1]]).is_finite()));
    }

    #[test]
    fn rejects_bad_mixture_weights() {
        let spec = DatasetSpec {
            kind: DatasetKind::GaussianMixture {
                centers: vec![vec![0.0], vec![1.0]],
                weights: vec![0.5, 0.6],
                var: 0.1,
            },
            n_train: 1,
            n_eval: 1,
            seed: 0,
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn mixture_density_normalizes() {
        // Riemann sum of the density over a 1-D grid.
        let density = AnalyticDensity::Mixture {
            centers: vec![vec![-1.0], vec![2.0]],
            weights: vec![0.3, 0.7],
            var: 0.2,
        };
        let h = 1e-3;
        let total: f64 = (0..12_000)
            .map(|i| density.log_density(&[-5.0 + h * i as f64]).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn label_validation() {
        let batch = DataBatch {
            x: Array2::zeros((2, 1)),
            labels: Some(vec![0, 3]),
            num_classes: 2,
        };
        assert!(batch.validate().is_err());
    }
}

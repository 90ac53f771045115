use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::{par, rng};

pub const KRR_RIDGE: f64 = 1e-3;
/// Training points kept after the 80/20 split (kernel solve is cubic).
pub const KRR_TRAIN_CAP: usize = 2000;
const BANDWIDTH_SAMPLE: usize = 1000;
const MIN_SAMPLES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Result {
    pub score: f64,
    pub per_dim: Vec<f64>,
    pub regressor: String,
}

/// Maps rows to `Lambda^{-1/2} V^T (x - mean)` using the eigendecomposition
/// of the training covariance. Directions with negligible variance are
/// dropped.
struct Whitener {
    mean: Vec<f64>,
    /// `[k x d]`
    proj: Vec<Vec<f64>>,
}

impl Whitener {
    fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in x {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
                }
            }
        }
        let eig = SymmetricEigen::new(cov);
        let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let proj = (0..d)
            .filter(|&k| eig.eigenvalues[k] > 1e-12 * max.max(f64::MIN_POSITIVE))
            .map(|k| {
                let s = eig.eigenvalues[k].sqrt();
                (0..d).map(|i| eig.eigenvectors[(i, k)] / s).collect()
            })
            .collect();
        Self { mean, proj }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        self.proj
            .iter()
            .map(|p| {
                p.iter()
                    .zip(r.iter().zip(&self.mean))
                    .map(|(a, (v, m))| a * (v - m))
                    .sum()
            })
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Held-out R² of kernel ridge regression from `z_est` to each column of
/// `z_true`: inputs whitened on the training split, RBF kernel with
/// median-heuristic bandwidth, ridge `1e-3`, seeded 80/20 split.
pub fn r2_block(z_true: &Tensor, z_est: &Tensor, seed: u64) -> Result<R2Result> {
    if z_true.ndim() != 2 || z_est.ndim() != 2 || z_true.rows() != z_est.rows() {
        return Err(Error::shape(
            "r2_block",
            format!("{:?} vs {:?}", z_true.shape(), z_est.shape()),
        ));
    }
    let n = z_true.rows();
    if n < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    if !z_true.is_finite() || !z_est.is_finite() {
        return Err(Error::non_finite("r2_block input"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x52]));
    let n_test = n / 5;
    let (test, train) = idx.split_at(n_test);
    let train = &train[..train.len().min(KRR_TRAIN_CAP)];

    let raw_train: Vec<Vec<f64>> = train.iter().map(|&r| z_est.row(r).to_vec()).collect();
    let w = Whitener::fit(&raw_train);
    let xtr: Vec<Vec<f64>> = raw_train.iter().map(|r| w.apply(r)).collect();
    let xte: Vec<Vec<f64>> = test.iter().map(|&r| w.apply(z_est.row(r))).collect();

    let sample = &xtr[..xtr.len().min(BANDWIDTH_SAMPLE)];
    let mut dists = Vec::with_capacity(sample.len() * sample.len() / 2);
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            dists.push(sq_dist(&sample[i], &sample[j]).sqrt());
        }
    }
    let h = median(dists);
    let gamma = if h > 0.0 { 0.5 / (h * h) } else { 1.0 };

    let m = xtr.len();
    let rows = par::map_range(m, |i| {
        (0..m)
            .map(|j| (-gamma * sq_dist(&xtr[i], &xtr[j])).exp())
            .collect::<Vec<f64>>()
    });
    let mut k = DMatrix::from_fn(m, m, |i, j| rows[i][j]);
    for i in 0..m {
        k[(i, i)] += KRR_RIDGE;
    }
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::Numerical("kernel matrix is not positive definite".into()))?;

    let dims = z_true.cols();
    let mut means = vec![0.0; dims];
    let mut y = DMatrix::<f64>::zeros(m, dims);
    for (i, &r) in train.iter().enumerate() {
        for d in 0..dims {
            y[(i, d)] = z_true.at(r, d);
            means[d] += z_true.at(r, d) / m as f64;
        }
    }
    for i in 0..m {
        for d in 0..dims {
            y[(i, d)] -= means[d];
        }
    }
    let alpha = chol.solve(&y);

    let preds = par::map_range(test.len(), |t| {
        let kr: Vec<f64> = xtr.iter().map(|x| (-gamma * sq_dist(&xte[t], x)).exp()).collect();
        (0..dims)
            .map(|d| means[d] + kr.iter().enumerate().map(|(i, v)| v * alpha[(i, d)]).sum::<f64>())
            .collect::<Vec<f64>>()
    });
    let mut per_dim = Vec::with_capacity(dims);
    for d in 0..dims {
        let truth: Vec<f64> = test.iter().map(|&r| z_true.at(r, d)).collect();
        let mu = truth.iter().sum::<f64>() / truth.len() as f64;
        let ss_tot: f64 = truth.iter().map(|v| (v - mu) * (v - mu)).sum();
        if !(ss_tot > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate split: true dimension {d} is constant on the test set"
            )));
        }
        let ss_res: f64 = truth.iter().zip(&preds).map(|(v, p)| (v - p[d]) * (v - p[d])).sum();
        per_dim.push(1.0 - ss_res / ss_tot);
    }
    let score = per_dim.iter().sum::<f64>() / dims.max(1) as f64;
    Ok(R2Result {
        score,
        per_dim,
        regressor: format!(
            "kernel ridge: whitened inputs, RBF gamma {gamma:.6e} (median distance {h:.6e}), ridge {KRR_RIDGE}, {m} train / {} test",
            test.len()
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_and_noise() {
        let z = gaussian(600, 2, 1);
        assert!(r2_block(&z, &z, 0).unwrap().score > 0.999);
        let noise = gaussian(600, 2, 2);
        assert!(r2_block(&z, &noise, 0).unwrap().score < 0.05);
    }

    #[test]
    fn degenerate_inputs() {
        let z = gaussian(40, 2, 1);
        assert!(r2_block(&z, &z, 0).is_err());
        let c = Tensor::zeros(&[100, 1]);
        assert!(r2_block(&c, &gaussian(100, 1, 3), 0).is_err());
    }
}

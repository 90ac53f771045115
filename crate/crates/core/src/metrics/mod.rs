//! Identifiability scores: component-wise MCC for the style block, kernel
//! ridge R² for the content block, partition search and scatter export.

mod assign;
mod krr;
mod report;

pub use assign::hungarian;
pub use krr::{r2_block, R2Result, KRR_RIDGE, KRR_TRAIN_CAP};
pub use report::{evaluate, MetricsReport, ReportSeeds};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::par;

pub const MAX_PARTITION_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MccResult {
    pub score: f64,
    /// `assignment[i]` is the estimated component matched to true component `i`.
    pub assignment: Vec<usize>,
    /// Signed Spearman correlations, true components in rows.
    pub correlation: Tensor,
}

/// Ranks with ties sharing their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman correlation between every column of `a` (rows of the result)
/// and every column of `b`.
pub fn spearman_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.rows() != b.rows() {
        return Err(Error::shape("spearman", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 samples, got {}",
            a.rows()
        )));
    }
    let ranked = |t: &Tensor, which: &str| -> Result<Vec<Vec<f64>>> {
        (0..t.cols())
            .map(|c| {
                let col = t.column(c);
                if col.iter().all(|&v| v == col[0]) {
                    return Err(Error::InvalidArgument(format!(
                        "{which} column {c} is constant; correlation undefined"
                    )));
                }
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!("{which} column {c}")));
                }
                Ok(ranks(&col))
            })
            .collect()
    };
    let ra = ranked(a, "true")?;
    let rb = ranked(b, "estimated")?;
    let mut data = Vec::with_capacity(ra.len() * rb.len());
    for x in &ra {
        for y in &rb {
            data.push(pearson(x, y));
        }
    }
    Tensor::matrix(ra.len(), rb.len(), data)
}

/// Mean absolute Spearman correlation under the best one-to-one matching.
pub fn mcc(z_true: &Tensor, z_est: &Tensor) -> Result<MccResult> {
    if z_true.cols() != z_est.cols() {
        return Err(Error::shape(
            "mcc",
            format!("{} true vs {} estimated components", z_true.cols(), z_est.cols()),
        ));
    }
    let correlation = spearman_matrix(z_true, z_est)?;
    let n = correlation.rows();
    let cost: Vec<f64> = correlation.data().iter().map(|c| -c.abs()).collect();
    let assignment = hungarian(&cost, n);
    let score = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| correlation.at(i, j).abs())
        .sum::<f64>()
        / n as f64;
    Ok(MccResult {
        score,
        assignment,
        correlation,
    })
}

/// Scores of one split of the estimated components into style and content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub style: Vec<usize>,
    pub content: Vec<usize>,
    pub mcc: f64,
    pub r2: f64,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSearch {
    pub best: Partition,
    /// Every candidate, in lexicographic order of the style subset.
    pub all: Vec<Partition>,
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Tries every size-`n_s` subset of estimated components as the style block
/// (true style = last `n_s` columns of `z_true`) and keeps the split with
/// the highest `(MCC + R²) / 2`.
pub fn partition_search(z_true: &Tensor, z_est: &Tensor, n_style: usize, seed: u64) -> Result<PartitionSearch> {
    let n = z_true.cols();
    if z_est.cols() != n || z_est.rows() != z_true.rows() {
        return Err(Error::shape(
            "partition_search",
            format!("{:?} vs {:?}", z_true.shape(), z_est.shape()),
        ));
    }
    if n > MAX_PARTITION_DIM {
        return Err(Error::InvalidArgument(format!(
            "{n} components give too many partitions to enumerate (limit {MAX_PARTITION_DIM}); sample partitions instead"
        )));
    }
    if n_style == 0 || n_style >= n {
        return Err(Error::InvalidArgument(format!("need 0 < n_style < {n}, got {n_style}")));
    }
    let nc = n - n_style;
    let true_c = z_true.select_columns(&(0..nc).collect::<Vec<_>>());
    let true_s = z_true.select_columns(&(nc..n).collect::<Vec<_>>());
    let subsets = combinations(n, n_style);
    let scored = par::map_slice(&subsets, |style| -> Result<Partition> {
        let content: Vec<usize> = (0..n).filter(|i| !style.contains(i)).collect();
        let m = mcc(&true_s, &z_est.select_columns(style))?.score;
        let r = r2_block(&true_c, &z_est.select_columns(&content), seed)?.score;
        Ok(Partition {
            style: style.clone(),
            content,
            mcc: m,
            r2: r,
            avg: (m + r) / 2.0,
        })
    });
    let all: Vec<Partition> = scored.into_iter().collect::<Result<_>>()?;
    let best = all
        .iter()
        .fold(None::<&Partition>, |b, p| match b {
            Some(b) if b.avg >= p.avg => Some(b),
            _ => Some(p),
        })
        .cloned()
        .expect("at least one partition");
    Ok(PartitionSearch { best, all })
}

/// Writes every (estimated, true) component pair as long-format CSV with
/// columns `est_index,true_index,est_value,true_value`.
pub fn scatter_export(z_true: &Tensor, z_est: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if z_true.rows() != z_est.rows() || z_true.ndim() != 2 || z_est.ndim() != 2 {
        return Err(Error::shape(
            "scatter_export",
            format!("{:?} vs {:?}", z_true.shape(), z_est.shape()),
        ));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "est_index,true_index,est_value,true_value")?;
    for e in 0..z_est.cols() {
        for t in 0..z_true.cols() {
            for r in 0..z_true.rows() {
                writeln!(w, "{e},{t},{:e},{:e}", z_est.at(r, e), z_true.at(r, t))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::DomainSpec;
use crate::error::{Error, Result};

/// Numerical rank of the sufficient-change matrix at one style point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    pub rank: usize,
    pub required: usize,
    pub passed: bool,
    pub singular_values: Vec<f64>,
}

/// First and second derivatives of the Gaussian log-density of each style
/// component: `(-(z - mu) / s2, ..., -1 / s2, ...)`.
fn w_vector(spec: &DomainSpec, z: &[f64]) -> Vec<f64> {
    let first = z
        .iter()
        .zip(spec.mean.iter().zip(&spec.variance))
        .map(|(&zi, (&m, &v))| -(zi - m) / v);
    let second = spec.variance.iter().map(|&v| -1.0 / v);
    first.chain(second).collect()
}

/// Checks linear independence of `w(z, u_j) - w(z, u_0)` over all domains
/// `j >= 1`. Rank uses the SVD with tolerance `1e-8 * sigma_max`.
pub fn check_variability(specs: &[DomainSpec], z_style: &[f64]) -> Result<VariabilityReport> {
    let ns = z_style.len();
    let required = 2 * ns;
    if specs.len() < required + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} domains for {ns} style components, got {}",
            required + 1,
            specs.len()
        )));
    }
    if let Some(s) = specs.iter().find(|s| s.mean.len() != ns || s.variance.len() != ns) {
        return Err(Error::shape(
            "check_variability",
            format!("domain {} does not have {ns} style components", s.id),
        ));
    }
    let base = w_vector(&specs[0], z_style);
    let rows = specs.len() - 1;
    let mut data = Vec::with_capacity(rows * required);
    for s in &specs[1..] {
        data.extend(w_vector(s, z_style).iter().zip(&base).map(|(a, b)| a - b));
    }
    let m = DMatrix::from_row_slice(rows, required, &data);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let max = sv.first().copied().unwrap_or(0.0);
    let rank = if max > 0.0 {
        sv.iter().filter(|&&s| s > 1e-8 * max).count()
    } else {
        0
    };
    Ok(VariabilityReport {
        rank,
        required,
        passed: rank == required,
        singular_values: sv,
    })
}

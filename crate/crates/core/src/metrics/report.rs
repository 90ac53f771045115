use serde::{Deserialize, Serialize};

use super::{mcc, partition_search, r2_block, Partition};
use crate::error::{Error, Result};
use crate::genproc::Dataset;
use crate::imsda::{Batch, ModelState};
use crate::ndgrad::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSeeds {
    pub model: u64,
    pub domain: u64,
    pub mixing: u64,
    pub sampling: u64,
    pub metric: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcc: f64,
    pub r2: f64,
    pub avg: f64,
    /// `assignment[i]`: style estimate matched to true style component `i`.
    pub assignment: Vec<usize>,
    /// Estimated components treated as style.
    pub partition: Vec<usize>,
    pub correlation: Tensor,
    pub r2_per_dim: Vec<f64>,
    pub regressor: String,
    /// VAE loss of each domain's test rows.
    pub per_domain_loss: Vec<f64>,
    /// Every style/content split, when partition search was requested.
    pub partitions: Vec<Partition>,
    pub seeds: ReportSeeds,
    pub config_hash: String,
    pub test_samples: usize,
}

/// Scores a model on a held-out dataset using posterior means. The style
/// block is the model's last `n_s` latents unless `search` asks for the
/// best of all partitions.
pub fn evaluate(state: &ModelState, test: &Dataset, metric_seed: u64, search: bool) -> Result<MetricsReport> {
    let c = &state.config;
    let g = &test.config;
    if g.n_content != c.n_content || g.n_style != c.n_style || test.x.cols() != c.n_obs || g.domains != c.domains {
        return Err(Error::Extent(format!(
            "dataset (n_c {}, n_s {}, n_obs {}, d {}) does not match model (n_c {}, n_s {}, n_obs {}, d {})",
            g.n_content,
            g.n_style,
            test.x.cols(),
            g.domains,
            c.n_content,
            c.n_style,
            c.n_obs,
            c.domains
        )));
    }
    let (nc, n) = (c.n_content, c.n_latent());
    let z_est = state.embed(&test.x)?;
    let (style, m, r, partitions) = if search {
        let s = partition_search(&test.z, &z_est, c.n_style, metric_seed)?;
        let best = s.best.clone();
        let m = mcc(&test.style(), &z_est.select_columns(&best.style))?;
        let r = r2_block(&test.content(), &z_est.select_columns(&best.content), metric_seed)?;
        (best.style, m, r, s.all)
    } else {
        let style: Vec<usize> = (nc..n).collect();
        let content: Vec<usize> = (0..nc).collect();
        let m = mcc(&test.style(), &z_est.select_columns(&style))?;
        let r = r2_block(&test.content(), &z_est.select_columns(&content), metric_seed)?;
        (style, m, r, Vec::new())
    };

    let mut per_domain_loss = Vec::with_capacity(c.domains);
    for d in 0..c.domains {
        let sub = test.subset(&[d]);
        if sub.is_empty() {
            per_domain_loss.push(f64::NAN);
            continue;
        }
        let batch = Batch {
            x: sub.x.clone(),
            u: sub.u.clone(),
            y: None,
        };
        let noise = state.noise(sub.len(), &[0xe7a1, d as u64]);
        per_domain_loss.push(state.vae_loss(&batch, &noise)?.vae);
    }

    Ok(MetricsReport {
        avg: (m.score + r.score) / 2.0,
        mcc: m.score,
        r2: r.score,
        assignment: m.assignment,
        partition: style,
        correlation: m.correlation,
        r2_per_dim: r.per_dim,
        regressor: r.regressor,
        per_domain_loss,
        partitions,
        seeds: ReportSeeds {
            model: c.seed,
            domain: g.domain_seed,
            mixing: g.mixing_seed,
            sampling: g.sampling_seed,
            metric: metric_seed,
        },
        config_hash: c.hash(),
        test_samples: test.len(),
    })
}

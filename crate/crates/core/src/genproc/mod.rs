//! Ground-truth generating process: content `z_c ~ N(0, I)`, per-domain
//! Gaussian style `z_s = mu_u + sigma_u * z~_s` with `z~_s ~ N(0, I)`, and
//! observations `x = g(z_c, z_s)` through a random invertible leaky-ReLU MLP.

mod io;
mod variability;

pub use io::{load_dataset, save_dataset, write_csv, DATASET_MAGIC, DATASET_VERSION};
pub use variability::{check_variability, VariabilityReport};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::nets::{Activation, Layer, Mlp};
use crate::{par, rng};

pub const MEAN_RANGE: (f64, f64) = (-4.0, 4.0);
pub const VARIANCE_RANGE: (f64, f64) = (0.01, 1.0);
pub const MIXING_SLOPE: f64 = 0.2;
pub const MAX_CONDITION: f64 = 1e3;
pub const MIXING_TRIES: usize = 100;
const LABELER_HIDDEN: usize = 16;

/// Style distribution of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DomainSpec {
    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.variance.len() {
            return Err(Error::Config(format!(
                "domain {}: {} means but {} variances",
                self.id,
                self.mean.len(),
                self.variance.len()
            )));
        }
        if self.variance.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!(
                "domain {}: variances must be finite and positive",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_content: usize,
    pub n_style: usize,
    pub domains: usize,
    pub samples_per_domain: usize,
    /// Number of affine layers of the mixing MLP.
    pub mixing_depth: usize,
    pub domain_seed: u64,
    pub mixing_seed: u64,
    pub sampling_seed: u64,
    pub labeled: bool,
    pub n_classes: usize,
    /// Replace the mixing MLP with the identity (`x = z`).
    pub identity_mixing: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_content: 2,
            n_style: 2,
            domains: 9,
            samples_per_domain: 1000,
            mixing_depth: 2,
            domain_seed: 0,
            mixing_seed: 1,
            sampling_seed: 2,
            labeled: false,
            n_classes: 4,
            identity_mixing: false,
        }
    }
}

impl GenConfig {
    pub fn n_latent(&self) -> usize {
        self.n_content + self.n_style
    }

    /// Observations have the latent width (square mixing).
    pub fn n_obs(&self) -> usize {
        self.n_latent()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_latent() == 0 {
            return Err(Error::Config("n_content + n_style must be >= 1".into()));
        }
        if self.domains == 0 {
            return Err(Error::Config("domains must be >= 1".into()));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::Config("samples_per_domain must be >= 1".into()));
        }
        if self.mixing_depth == 0 {
            return Err(Error::Config("mixing_depth must be >= 1".into()));
        }
        if self.labeled && self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2 when labeled".into()));
        }
        Ok(())
    }

    /// Same mixing and domains, fresh samples: the held-out test draw.
    pub fn test_split(&self, samples_per_domain: usize) -> Self {
        Self {
            samples_per_domain,
            sampling_seed: rng::derive(self.sampling_seed, &[0x7e57]),
            ..self.clone()
        }
    }
}

/// Observations with their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub specs: Vec<DomainSpec>,
    /// `[N, n_obs]`
    pub x: Tensor,
    /// `[N, n]`, content columns first.
    pub z: Tensor,
    pub u: Vec<usize>,
    pub y: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn content(&self) -> Tensor {
        let cols: Vec<usize> = (0..self.config.n_content).collect();
        self.z.select_columns(&cols)
    }

    pub fn style(&self) -> Tensor {
        let nc = self.config.n_content;
        let cols: Vec<usize> = (nc..nc + self.config.n_style).collect();
        self.z.select_columns(&cols)
    }

    /// Standardized style `(z_s - mu_u) / sigma_u`, the domain-free generic
    /// style.
    pub fn generic_style(&self) -> Tensor {
        let zs = self.style();
        let ns = self.config.n_style;
        let mut data = zs.into_data();
        for (r, row) in data.chunks_exact_mut(ns.max(1)).enumerate() {
            let spec = &self.specs[self.u[r]];
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - spec.mean[i]) / spec.variance[i].sqrt();
            }
        }
        Tensor::matrix(self.len(), ns, data).expect("style shape")
    }

    /// Rows belonging to any of `domains`, in original order.
    pub fn subset(&self, domains: &[usize]) -> Dataset {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| domains.contains(&self.u[r])).collect();
        Dataset {
            config: self.config.clone(),
            specs: self.specs.clone(),
            x: self.x.select_rows(&rows),
            z: self.z.select_rows(&rows),
            u: rows.iter().map(|&r| self.u[r]).collect(),
            y: self.y.as_ref().map(|y| rows.iter().map(|&r| y[r]).collect()),
        }
    }
}

/// Independent per-domain, per-component draws of `mu ~ U(-4, 4)` and
/// `sigma^2 ~ U(0.01, 1)`.
pub fn sample_domain_specs(domains: usize, n_style: usize, seed: u64) -> Vec<DomainSpec> {
    let mean = Uniform::new_inclusive(MEAN_RANGE.0, MEAN_RANGE.1).expect("mean range");
    let var = Uniform::new_inclusive(VARIANCE_RANGE.0, VARIANCE_RANGE.1).expect("variance range");
    let mut r = rng::stream(seed, &[0xd0]);
    (0..domains)
        .map(|id| {
            let mut m = Vec::with_capacity(n_style);
            let mut v = Vec::with_capacity(n_style);
            for _ in 0..n_style {
                m.push(mean.sample(&mut r));
                v.push(var.sample(&mut r));
            }
            DomainSpec {
                id,
                mean: m,
                variance: v,
            }
        })
        .collect()
}

pub fn condition_number(w: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Square `n -> n -> ... -> n` leaky-ReLU MLP (`depth` affine layers, zero
/// biases) whose weight matrices each have condition number below 1e3.
pub fn make_mixing_with_depth(n: usize, depth: usize, seed: u64) -> Result<Mlp> {
    if n == 0 || depth == 0 {
        return Err(Error::InvalidArgument(format!(
            "mixing needs n >= 1 and depth >= 1 (got {n}, {depth})"
        )));
    }
    let act = Activation::LeakyRelu(MIXING_SLOPE);
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut r = rng::stream(seed, &[0x313, l as u64]);
        let mut accepted = None;
        for _ in 0..MIXING_TRIES {
            let cand = Mlp::init_with(&[n, n], act, &mut r)?;
            let layer = cand.layers.into_iter().next().expect("one layer");
            if condition_number(&layer.weight) < MAX_CONDITION {
                accepted = Some(layer);
                break;
            }
        }
        layers.push(accepted.ok_or_else(|| {
            Error::Numerical(format!(
                "no mixing layer with condition number < {MAX_CONDITION} in {MIXING_TRIES} draws"
            ))
        })?);
    }
    Mlp::from_layers(layers, act)
}

/// The two-layer mixing `g`.
pub fn make_mixing(n: usize, seed: u64) -> Result<Mlp> {
    make_mixing_with_depth(n, 2, seed)
}

pub fn identity_mixing(n: usize) -> Mlp {
    Mlp::from_layers(
        vec![Layer {
            weight: Tensor::identity(n),
            bias: Tensor::zeros(&[n]),
        }],
        Activation::Identity,
    )
    .expect("identity layer")
}

/// The mixing a config describes.
pub fn mixing_for(cfg: &GenConfig) -> Result<Mlp> {
    if cfg.identity_mixing {
        Ok(identity_mixing(cfg.n_latent()))
    } else {
        make_mixing_with_depth(cfg.n_latent(), cfg.mixing_depth, cfg.mixing_seed)
    }
}

/// Fixed random labeler on `(z_c, z~_s)`. The output bias is calibrated on a
/// reference draw so that classes are roughly balanced.
pub fn make_labeler(n: usize, classes: usize, seed: u64) -> Result<Mlp> {
    let mut r = rng::stream(seed, &[0x1abe1]);
    let mut net = Mlp::init_with(
        &[n, LABELER_HIDDEN, classes],
        Activation::LeakyRelu(MIXING_SLOPE),
        &mut r,
    )?;
    let reference = 4096;
    let data: Vec<f64> = (0..reference * n).map(|_| StandardNormal.sample(&mut r)).collect();
    let probe = Tensor::matrix(reference, n, data)?;
    for _ in 0..50 {
        let labels = argmax_rows(&net.forward(&probe)?);
        let mut counts = vec![0usize; classes];
        for l in labels {
            counts[l] += 1;
        }
        let last = net.layers.len() - 1;
        let bias = net.layers[last].bias.data_mut();
        for (b, &c) in bias.iter_mut().zip(&counts) {
            let freq = (c as f64 + 1.0) / (reference as f64 + classes as f64);
            *b -= 0.5 * (freq * classes as f64).ln();
        }
    }
    Ok(net)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

struct DomainDraw {
    z: Vec<f64>,
    generic: Vec<f64>,
}

fn sample_domain(cfg: &GenConfig, spec: &DomainSpec) -> DomainDraw {
    let (nc, ns, m) = (cfg.n_content, cfg.n_style, cfg.samples_per_domain);
    let n = nc + ns;
    let mut r = rng::stream(cfg.sampling_seed, &[0x5a, spec.id as u64]);
    let std = spec.std();
    let mut z = Vec::with_capacity(m * n);
    let mut generic = Vec::with_capacity(m * ns);
    for _ in 0..m {
        for _ in 0..nc {
            z.push(StandardNormal.sample(&mut r));
        }
        for (mu, sd) in spec.mean.iter().zip(&std) {
            let e: f64 = StandardNormal.sample(&mut r);
            generic.push(e);
            z.push(mu + sd * e);
        }
    }
    DomainDraw { z, generic }
}

/// Draws a dataset; rows are grouped by domain in increasing id.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    let specs = sample_domain_specs(cfg.domains, cfg.n_style, cfg.domain_seed);
    generate_with_specs(cfg, specs)
}

pub fn generate_with_specs(cfg: &GenConfig, specs: Vec<DomainSpec>) -> Result<Dataset> {
    cfg.validate()?;
    if specs.len() != cfg.domains {
        return Err(Error::Config(format!(
            "{} domain specs for {} domains",
            specs.len(),
            cfg.domains
        )));
    }
    for s in &specs {
        s.validate()?;
        if s.mean.len() != cfg.n_style {
            return Err(Error::Config(format!(
                "domain {} has {} style components, config says {}",
                s.id,
                s.mean.len(),
                cfg.n_style
            )));
        }
    }
    let n = cfg.n_latent();
    let draws = par::map_slice(&specs, |s| sample_domain(cfg, s));
    let total = cfg.domains * cfg.samples_per_domain;
    let mut z = Vec::with_capacity(total * n);
    let mut generic = Vec::with_capacity(total * cfg.n_style);
    let mut u = Vec::with_capacity(total);
    for (d, draw) in draws.into_iter().enumerate() {
        z.extend(draw.z);
        generic.extend(draw.generic);
        u.extend(std::iter::repeat_n(d, cfg.samples_per_domain));
    }
    let z = Tensor::matrix(total, n, z)?;
    let x = mixing_for(cfg)?.forward(&z)?;

    let y = if cfg.labeled {
        let labeler = make_labeler(n, cfg.n_classes, cfg.mixing_seed)?;
        let nc = cfg.n_content;
        let ns = cfg.n_style;
        let mut inputs = Vec::with_capacity(total * n);
        for r in 0..total {
            inputs.extend_from_slice(&z.row(r)[..nc]);
            inputs.extend_from_slice(&generic[r * ns..(r + 1) * ns]);
        }
        let logits = labeler.forward(&Tensor::matrix(total, n, inputs)?)?;
        Some(argmax_rows(&logits))
    } else {
        None
    };

    Ok(Dataset {
        config: cfg.clone(),
        specs,
        x,
        z,
        u,
        y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_within_ranges_and_deterministic() {
        let s = sample_domain_specs(9, 2, 11);
        assert_eq!(s.len(), 9);
        for d in &s {
            assert_eq!(d.mean.len(), 2);
            assert_eq!(d.variance.len(), 2);
            assert!(d.mean.iter().all(|m| (-4.0..=4.0).contains(m)));
            assert!(d.variance.iter().all(|v| (0.01..=1.0).contains(v)));
        }
        assert_eq!(s, sample_domain_specs(9, 2, 11));
        assert_ne!(s, sample_domain_specs(9, 2, 12));
    }

    #[test]
    fn mixing_is_square_and_conditioned() {
        let g = make_mixing(4, 3).unwrap();
        assert_eq!(g.layers.len(), 2);
        for l in &g.layers {
            assert_eq!(l.weight.shape(), &[4, 4]);
            assert!(condition_number(&l.weight) < MAX_CONDITION);
        }
        assert_eq!(g.activation, Activation::LeakyRelu(0.2));
    }

    #[test]
    fn condition_number_of_known_matrix() {
        let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!((condition_number(&w) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn identity_mixing_hook() {
        let cfg = GenConfig {
            identity_mixing: true,
            samples_per_domain: 50,
            domains: 3,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.x, ds.z);
    }

    #[test]
    fn layout_and_counts() {
        let cfg = GenConfig {
            domains: 3,
            samples_per_domain: 20,
            labeled: true,
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.len(), 60);
        assert_eq!(ds.x.shape(), &[60, 4]);
        for d in 0..3 {
            assert_eq!(ds.u.iter().filter(|&&u| u == d).count(), 20);
        }
        let y = ds.y.as_ref().unwrap();
        assert!(y.iter().all(|&c| c < 4));
        assert_eq!(ds, generate(&cfg).unwrap());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GenConfig {
            domains: 0,
            ..Default::default()
        };
        assert!(generate(&cfg).is_err());
        let bad = vec![DomainSpec {
            id: 0,
            mean: vec![0.0, 0.0],
            variance: vec![1.0, -1.0],
        }];
        let cfg = GenConfig {
            domains: 1,
            ..Default::default()
        };
        assert!(generate_with_specs(&cfg, bad).is_err());
    }

    #[test]
    fn labeler_is_roughly_balanced() {
        let net = make_labeler(4, 4, 5).unwrap();
        let mut r = rng::seeded(99);
        let data: Vec<f64> = (0..8000 * 4).map(|_| StandardNormal.sample(&mut r)).collect();
        let labels = argmax_rows(&net.forward(&Tensor::matrix(8000, 4, data).unwrap()).unwrap());
        for c in 0..4 {
            let frac = labels.iter().filter(|&&l| l == c).count() as f64 / 8000.0;
            assert!(frac > 0.1, "class {c} frequency {frac}");
        }
    }
}

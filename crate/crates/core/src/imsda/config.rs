use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::AdamWConfig;

/// Family of the per-domain style flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    /// Monotonic linear-rational splines.
    Spline,
    /// Per-domain affine maps.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_content: usize,
    pub n_style: usize,
    pub n_obs: usize,
    pub domains: usize,
    /// Width of every hidden layer of the encoder and decoder.
    pub hidden: usize,
    /// Number of affine layers in the encoder and in the decoder.
    pub depth: usize,
    pub classifier_hidden: Vec<usize>,
    pub n_classes: usize,
    pub slope: f64,
    pub flow: FlowKind,
    pub bins: usize,
    pub bound: f64,
    pub beta: f64,
    /// Weight of the conditional entropy term.
    pub alpha_ent: f64,
    /// Weight of the VAE term.
    pub alpha_vae: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Adds the classifier with its cross-entropy and entropy losses.
    pub labeled: bool,
    /// Unlabeled target domains (labeled mode only).
    pub target_domains: Vec<usize>,
    /// Keep the flows at their initial value.
    pub freeze_flows: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_content: 2,
            n_style: 2,
            n_obs: 4,
            domains: 9,
            hidden: 32,
            depth: 6,
            classifier_hidden: vec![32, 32],
            n_classes: 4,
            slope: 0.2,
            flow: FlowKind::Spline,
            bins: 8,
            bound: 5.0,
            beta: 0.1,
            alpha_ent: 0.1,
            alpha_vae: 1.0,
            lr: 0.002,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            labeled: false,
            target_domains: Vec::new(),
            freeze_flows: false,
        }
    }
}

impl ModelConfig {
    pub fn n_latent(&self) -> usize {
        self.n_content + self.n_style
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_latent() == 0 {
            return fail("n_content + n_style must be >= 1".into());
        }
        if self.n_obs == 0 {
            return fail("n_obs must be >= 1".into());
        }
        if self.domains == 0 {
            return fail("domains must be >= 1".into());
        }
        if self.depth == 0 || self.hidden == 0 {
            return fail("depth and hidden must be >= 1".into());
        }
        if self.bins == 0 || !(self.bound > 0.0) {
            return fail(format!(
                "bins must be >= 1 and bound > 0 (got {}, {})",
                self.bins, self.bound
            ));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("alpha_ent", self.alpha_ent),
            ("alpha_vae", self.alpha_vae),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.classifier_hidden.contains(&0) {
            return fail("classifier_hidden entries must be >= 1".into());
        }
        if self.labeled {
            if self.n_classes < 2 {
                return fail("n_classes must be >= 2 in labeled mode".into());
            }
            if let Some(&t) = self.target_domains.iter().find(|&&t| t >= self.domains) {
                return fail(format!("target domain {t} >= domains {}", self.domains));
            }
            if self.target_domains.len() >= self.domains {
                return fail("labeled mode needs at least one source domain".into());
            }
        }
        Ok(())
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.n_obs];
        d.extend(std::iter::repeat_n(self.hidden, self.depth - 1));
        d.push(2 * self.n_latent());
        d
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.n_latent()];
        d.extend(std::iter::repeat_n(self.hidden, self.depth - 1));
        d.push(self.n_obs);
        d
    }

    pub fn classifier_dims(&self) -> Vec<usize> {
        let mut d = vec![self.n_latent()];
        d.extend(&self.classifier_hidden);
        d.push(self.n_classes);
        d
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

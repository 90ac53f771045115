//! The estimator: a VAE whose style latents are pulled back to a shared
//! generic style by per-domain monotonic flows, plus an optional classifier
//! on the content and generic-style latents.

mod checkpoint;
mod config;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{FlowKind, ModelConfig};
pub use loss::{cls_loss, ent_loss, reparam, Batch, LossParts, LossVars};
pub use train::{train, train_until, LogRecord, TrainAbort, TrainSet};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flows::{AffineBank, BoundFlows, DomainFlows, FlowBank};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::nets::{Activation, AdamW, BoundMlp, Mlp};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub flows: DomainFlows,
    pub classifier: Mlp,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

/// All networks of a [`ModelState`] bound into one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
    pub flows: BoundFlows,
    pub classifier: BoundMlp,
}

impl ModelState {
    /// Fresh state: Kaiming-initialized networks and identity flows.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let act = Activation::LeakyRelu(config.slope);
        let seed = config.seed;
        let encoder = Mlp::init(&config.encoder_dims(), act, rng::derive(seed, &[0xe1c]))?;
        let decoder = Mlp::init(&config.decoder_dims(), act, rng::derive(seed, &[0xdec]))?;
        let classifier = Mlp::init(&config.classifier_dims(), act, rng::derive(seed, &[0xc15]))?;
        let flows = match config.flow {
            FlowKind::Spline => DomainFlows::Spline(FlowBank::identity(
                config.domains,
                config.n_style,
                config.bins,
                config.bound,
            )?),
            FlowKind::Affine => DomainFlows::Affine(AffineBank::new(
                Tensor::zeros(&[config.domains, config.n_style]),
                Tensor::zeros(&[config.domains, config.n_style]),
            )?),
        };
        let mut state = Self {
            optimizer: AdamW::new(config.optimizer(), std::iter::empty()),
            config,
            encoder,
            decoder,
            flows,
            classifier,
            epoch: 0,
            step: 0,
        };
        state.reset_optimizer();
        Ok(state)
    }

    /// Zeroes the optimizer moments for the current trainable set.
    pub fn reset_optimizer(&mut self) {
        let params = self.params();
        let trainable = self.trainable();
        self.optimizer = AdamW::new(self.config.optimizer(), trainable.iter().map(|&i| params[i]));
    }

    /// Every parameter tensor: encoder, decoder, flows, classifier.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.encoder.params().collect();
        p.extend(self.decoder.params());
        p.extend(self.flows.params());
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.encoder.params_mut().collect();
        p.extend(self.decoder.params_mut());
        p.extend(self.flows.params_mut());
        p.extend(self.classifier.params_mut());
        p
    }

    /// Names aligned with [`Self::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (net, m) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for l in 0..m.layers.len() {
                names.push(format!("{net}.{l}.weight"));
                names.push(format!("{net}.{l}.bias"));
            }
        }
        names.extend(self.flows.param_names().iter().map(|n| format!("flows.{n}")));
        for l in 0..self.classifier.layers.len() {
            names.push(format!("classifier.{l}.weight"));
            names.push(format!("classifier.{l}.bias"));
        }
        names
    }

    fn flow_range(&self) -> std::ops::Range<usize> {
        let start = 2 * (self.encoder.layers.len() + self.decoder.layers.len());
        start..start + self.flows.params().len()
    }

    fn classifier_range(&self) -> std::ops::Range<usize> {
        let start = self.flow_range().end;
        start..start + 2 * self.classifier.layers.len()
    }

    /// Indices into [`Self::params`] that the optimizer updates.
    pub fn trainable(&self) -> Vec<usize> {
        let flows = self.flow_range();
        let cls = self.classifier_range();
        (0..cls.end)
            .filter(|i| !(self.config.freeze_flows && flows.contains(i)))
            .filter(|i| self.config.labeled || !cls.contains(i))
            .collect()
    }

    /// Binds every parameter; trainable ones become graph parameters.
    pub fn bind(&self, g: &mut Graph) -> Result<BoundModel> {
        let trainable = self.trainable();
        let leaves: Vec<Var> = self
            .params()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable.binary_search(&i).is_ok() {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        self.bind_leaves(g, &leaves)
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<BoundModel> {
        let leaves: Vec<Var> = self.params().into_iter().map(|t| g.constant(t.clone())).collect();
        self.bind_leaves(g, &leaves)
    }

    /// Assembles the networks from existing leaves in [`Self::params`] order.
    pub fn bind_leaves(&self, g: &mut Graph, leaves: &[Var]) -> Result<BoundModel> {
        let total = self.classifier_range().end;
        if leaves.len() != total {
            return Err(Error::shape(
                "model_bind",
                format!("{} leaves for {total} parameters", leaves.len()),
            ));
        }
        let mlp = |m: &Mlp, vars: &[Var]| BoundMlp {
            layers: vars.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
            activation: m.activation,
        };
        let e = 2 * self.encoder.layers.len();
        let d = e + 2 * self.decoder.layers.len();
        let fr = self.flow_range();
        Ok(BoundModel {
            encoder: mlp(&self.encoder, &leaves[..e]),
            decoder: mlp(&self.decoder, &leaves[e..d]),
            flows: self.flows.bind_leaves(g, &leaves[fr.clone()])?,
            classifier: mlp(&self.classifier, &leaves[fr.end..]),
        })
    }

    fn check_width(&self, op: &'static str, x: &Tensor, width: usize) -> Result<()> {
        if x.ndim() != 2 || x.cols() != width {
            return Err(Error::shape(
                op,
                format!("input {:?}, expected width {width}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Posterior parameters `(mu, log sigma^2)`, each `[b, n]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_width("encode", x, self.config.n_obs)?;
        let h = self.encoder.forward(x)?;
        if !h.is_finite() {
            return Err(Error::non_finite("encoder output"));
        }
        let n = self.config.n_latent();
        let mu = h.select_columns(&(0..n).collect::<Vec<_>>());
        let logvar = h.select_columns(&(n..2 * n).collect::<Vec<_>>());
        Ok((mu, logvar))
    }

    /// Posterior means in batches, the point estimate used for evaluation.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x)?.0)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width("decode", z, self.config.n_latent())?;
        self.decoder.forward(z)
    }

    /// Splits `z` into content and style and maps each style row through its
    /// domain's inverse flow. Returns `(z_c, z~_s, logdet_inv per row)`.
    pub fn recover_high_level(&self, z: &Tensor, u: &[usize]) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let (nc, ns) = (self.config.n_content, self.config.n_style);
        self.check_width("recover_high_level", z, nc + ns)?;
        if u.len() != z.rows() {
            return Err(Error::shape(
                "recover_high_level",
                format!("{} rows but {} domain ids", z.rows(), u.len()),
            ));
        }
        let zc = z.select_columns(&(0..nc).collect::<Vec<_>>());
        let mut zt = Vec::with_capacity(z.rows() * ns);
        let mut ld = Vec::with_capacity(z.rows());
        for (r, &d) in u.iter().enumerate() {
            let (out, l) = self.flows.inverse(d, &z.row(r)[nc..])?;
            zt.extend(out);
            ld.push(l);
        }
        Ok((zc, Tensor::matrix(z.rows(), ns, zt)?, ld))
    }

    /// Softmax class probabilities from content and generic style.
    pub fn classify(&self, zc: &Tensor, zt: &Tensor) -> Result<Tensor> {
        self.check_width("classify", zc, self.config.n_content)?;
        self.check_width("classify", zt, self.config.n_style)?;
        if zc.rows() != zt.rows() {
            return Err(Error::shape("classify", format!("{} vs {} rows", zc.rows(), zt.rows())));
        }
        let mut g = Graph::new();
        let a = g.constant(zc.clone());
        let b = g.constant(zt.clone());
        let input = g.concat(&[a, b])?;
        let cls = self.classifier.bind_with(&mut g, false);
        let logits = cls.forward(&mut g, input)?;
        let lp = g.log_softmax(logits)?;
        Ok(g.value(lp).map(f64::exp))
    }

    /// Class predictions from posterior means.
    pub fn predict(&self, x: &Tensor, u: &[usize]) -> Result<Vec<usize>> {
        let z = self.embed(x)?;
        let (zc, zt, _) = self.recover_high_level(&z, u)?;
        let p = self.classify(&zc, &zt)?;
        Ok(crate::genproc::argmax_rows(&p))
    }

    /// Standard-normal noise for a `[rows, n]` reparameterization, drawn from
    /// a stream keyed by `tags`.
    pub fn noise(&self, rows: usize, tags: &[u64]) -> Tensor {
        let n = self.config.n_latent();
        let mut r = rng::stream(self.config.seed, tags);
        let data = (0..rows * n).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::matrix(rows, n, data).expect("noise shape")
    }
}

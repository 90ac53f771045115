use serde::{Deserialize, Serialize};

use super::{BoundModel, ModelState};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};

/// A minibatch. `y` is absent for target-domain batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[b, n_obs]`
    pub x: Tensor,
    pub u: Vec<usize>,
    pub y: Option<Vec<usize>>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.u.len()
    }

    fn check(&self, state: &ModelState) -> Result<()> {
        let c = &state.config;
        if self.x.ndim() != 2 || self.x.cols() != c.n_obs || self.x.rows() != self.u.len() {
            return Err(Error::shape(
                "batch",
                format!(
                    "x {:?} with {} domain ids, n_obs {}",
                    self.x.shape(),
                    self.u.len(),
                    c.n_obs
                ),
            ));
        }
        if self.u.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(&d) = self.u.iter().find(|&&d| d >= c.domains) {
            return Err(Error::UnknownDomain {
                id: d,
                count: c.domains,
            });
        }
        if let Some(y) = &self.y {
            if y.len() != self.u.len() {
                return Err(Error::shape(
                    "batch",
                    format!("{} labels for {} rows", y.len(), self.u.len()),
                ));
            }
            if let Some(&l) = y.iter().find(|&&l| l >= c.n_classes) {
                return Err(Error::ClassOutOfRange {
                    id: l,
                    classes: c.n_classes,
                });
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub kl_content: f64,
    pub kl_style: f64,
    pub vae: f64,
    pub cls: f64,
    pub ent: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.rec,
            self.kl,
            self.kl_content,
            self.kl_style,
            self.vae,
            self.cls,
            self.ent,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        format!(
            "total={} rec={} kl_content={} kl_style={} cls={} ent={}",
            self.total, self.rec, self.kl_content, self.kl_style, self.cls, self.ent
        )
    }
}

/// The graph nodes of [`LossParts`].
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub kl_content: Var,
    pub kl_style: Var,
    pub vae: Var,
    pub cls: Option<Var>,
    pub ent: Option<Var>,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossParts {
        let v = |x: Var| g.value(x).item();
        LossParts {
            total: v(self.total),
            rec: v(self.rec),
            kl: v(self.kl_content) + v(self.kl_style),
            kl_content: v(self.kl_content),
            kl_style: v(self.kl_style),
            vae: v(self.vae),
            cls: self.cls.map_or(0.0, v),
            ent: self.ent.map_or(0.0, v),
        }
    }
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparam(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape(
            "reparam",
            format!("{:?}, {:?}, {:?}", mu.shape(), logvar.shape(), eps.shape()),
        ));
    }
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((m, l), e)| m + (0.5 * l).exp() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

/// `-mean_i log p_i(y_i)`.
pub fn cls_loss(probs: &Tensor, y: &[usize]) -> Result<f64> {
    if probs.ndim() != 2 || probs.rows() != y.len() || y.is_empty() {
        return Err(Error::shape(
            "cls_loss",
            format!("probs {:?}, {} labels", probs.shape(), y.len()),
        ));
    }
    let c = probs.cols();
    let mut total = 0.0;
    for (r, &l) in y.iter().enumerate() {
        if l >= c {
            return Err(Error::ClassOutOfRange { id: l, classes: c });
        }
        total -= probs.at(r, l).ln();
    }
    Ok(total / y.len() as f64)
}

/// Mean row entropy `-mean_i sum_c p_ic log p_ic`, with `0 log 0 = 0`.
pub fn ent_loss(probs: &Tensor) -> f64 {
    let rows = probs.rows().max(1);
    let s: f64 = probs.data().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    s / rows as f64
}

/// Per-batch sums of the VAE terms, before averaging.
struct VaeSums {
    rec: Var,
    kl_content: Var,
    kl_style: Var,
    zc: Var,
    zt: Var,
}

impl ModelState {
    fn vae_sums(&self, g: &mut Graph, m: &BoundModel, batch: &Batch, noise: &Tensor) -> Result<VaeSums> {
        let (nc, n) = (self.config.n_content, self.config.n_latent());
        if noise.shape() != [batch.rows(), n] {
            return Err(Error::shape(
                "vae_loss",
                format!("noise {:?} for {} rows of width {n}", noise.shape(), batch.rows()),
            ));
        }
        let x = g.constant(batch.x.clone());
        let h = m.encoder.forward(g, x)?;
        let mu = g.slice_cols(h, 0, n)?;
        let logvar = g.slice_cols(h, n, 2 * n)?;
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let eps = g.constant(noise.clone());
        let spread = g.mul(std, eps)?;
        let z = g.add(mu, spread)?;

        let xhat = m.decoder.forward(g, z)?;
        let diff = g.sub(x, xhat)?;
        let sq = g.square(diff);
        let rec = g.sum(sq);
        let rec = g.scale(rec, 0.5);

        // closed form KL(N(mu, s^2) || N(0, 1)) = (mu^2 + s^2 - 1 - log s^2) / 2
        let mu_c = g.slice_cols(mu, 0, nc)?;
        let lv_c = g.slice_cols(logvar, 0, nc)?;
        let m2 = g.square(mu_c);
        let var_c = g.exp(lv_c);
        let a = g.add(m2, var_c)?;
        let a = g.sub(a, lv_c)?;
        let a = g.add_scalar(a, -1.0);
        let kl_content = g.sum(a);
        let kl_content = g.scale(kl_content, 0.5);

        // log q(z_s | x) - log N(z~_s; 0, I) - logdet_inv, constants cancel
        let zc = g.slice_cols(z, 0, nc)?;
        let zs = g.slice_cols(z, nc, n)?;
        let (zt, logdet) = m.flows.inverse(g, zs, &batch.u)?;
        let lv_s = g.slice_cols(logvar, nc, n)?;
        let eps_s = g.slice_cols(eps, nc, n)?;
        let e2 = g.square(eps_s);
        let zt2 = g.square(zt);
        let b = g.sub(zt2, e2)?;
        let b = g.sub(b, lv_s)?;
        let b = g.sum(b);
        let b = g.scale(b, 0.5);
        let ld = g.sum(logdet);
        let kl_style = g.sub(b, ld)?;

        Ok(VaeSums {
            rec,
            kl_content,
            kl_style,
            zc,
            zt,
        })
    }

    /// Returns `(cls_sum, ent_sum)` over the rows; `cls_sum` only when `y` is
    /// given.
    fn classifier_sums(
        &self,
        g: &mut Graph,
        m: &BoundModel,
        zc: Var,
        zt: Var,
        y: Option<&[usize]>,
    ) -> Result<(Option<Var>, Var)> {
        let input = g.concat(&[zc, zt])?;
        let logits = m.classifier.forward(g, input)?;
        let lp = g.log_softmax(logits)?;
        let p = g.exp(lp);
        let plp = g.mul(p, lp)?;
        let ent = g.sum(plp);
        let ent = g.neg(ent);
        let cls = match y {
            Some(y) => {
                let c = self.config.n_classes;
                let idx: Vec<usize> = y.iter().enumerate().map(|(r, &l)| r * c + l).collect();
                let picked = g.gather(lp, &idx)?;
                let s = g.sum(picked);
                Some(g.neg(s))
            }
            None => None,
        };
        Ok((cls, ent))
    }

    /// Builds the training objective. In unlabeled mode the objective is the
    /// VAE loss of `source`; in labeled mode it is
    /// `cls(source) + alpha_ent * ent(target) + alpha_vae * vae(source + target)`.
    /// `noise` holds one `[rows, n]` tensor per batch, source first.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        m: &BoundModel,
        source: &Batch,
        target: Option<&Batch>,
        noise: &[Tensor],
    ) -> Result<LossVars> {
        source.check(self)?;
        let labeled = self.config.labeled;
        if labeled && source.y.is_none() {
            return Err(Error::InvalidArgument(
                "labeled mode needs a labeled source batch".into(),
            ));
        }
        if let Some(t) = target {
            t.check(self)?;
            if t.y.is_some() {
                return Err(Error::InvalidArgument("target batch must be unlabeled".into()));
            }
            if !labeled {
                return Err(Error::InvalidArgument(
                    "target batches are only used in labeled mode".into(),
                ));
            }
        }
        let expected = 1 + usize::from(target.is_some());
        if noise.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{} noise tensors for {expected} batches",
                noise.len()
            )));
        }

        let s = self.vae_sums(g, m, source, &noise[0])?;
        let mut parts = vec![(s.rec, s.kl_content, s.kl_style)];
        let mut rows = source.rows();
        let tsums = match target {
            Some(t) => {
                let ts = self.vae_sums(g, m, t, &noise[1])?;
                parts.push((ts.rec, ts.kl_content, ts.kl_style));
                rows += t.rows();
                Some(ts)
            }
            None => None,
        };
        let inv = 1.0 / rows as f64;
        let mean = |g: &mut Graph, pick: fn(&(Var, Var, Var)) -> Var| -> Result<Var> {
            let mut acc = pick(&parts[0]);
            for p in &parts[1..] {
                acc = g.add(acc, pick(p))?;
            }
            Ok(g.scale(acc, inv))
        };
        let rec = mean(g, |p| p.0)?;
        let kl_content = mean(g, |p| p.1)?;
        let kl_style = mean(g, |p| p.2)?;
        let kl = g.add(kl_content, kl_style)?;
        let bkl = g.scale(kl, self.config.beta);
        let vae = g.add(rec, bkl)?;

        if !labeled {
            return Ok(LossVars {
                total: vae,
                rec,
                kl_content,
                kl_style,
                vae,
                cls: None,
                ent: None,
            });
        }

        let (cls_sum, src_ent) = self.classifier_sums(g, m, s.zc, s.zt, source.y.as_deref())?;
        let cls = g.scale(cls_sum.expect("labels present"), 1.0 / source.rows() as f64);
        let ent = match (&tsums, target) {
            (Some(ts), Some(t)) => {
                let (_, e) = self.classifier_sums(g, m, ts.zc, ts.zt, None)?;
                g.scale(e, 1.0 / t.rows() as f64)
            }
            _ => g.scale(src_ent, 0.0),
        };
        let we = g.scale(ent, self.config.alpha_ent);
        let wv = g.scale(vae, self.config.alpha_vae);
        let total = g.add(cls, we)?;
        let total = g.add(total, wv)?;
        Ok(LossVars {
            total,
            rec,
            kl_content,
            kl_style,
            vae,
            cls: Some(cls),
            ent: Some(ent),
        })
    }

    /// Evaluates [`Self::loss_graph`] without gradients.
    pub fn total_loss(&self, source: &Batch, target: Option<&Batch>, noise: &[Tensor]) -> Result<LossParts> {
        let mut g = Graph::new();
        let m = self.bind_frozen(&mut g)?;
        let vars = self.loss_graph(&mut g, &m, source, target, noise)?;
        let parts = vars.values(&g);
        if !parts.is_finite() {
            return Err(Error::non_finite(format!("loss ({})", parts.describe())));
        }
        Ok(parts)
    }

    /// The VAE objective of one batch, whatever the mode.
    pub fn vae_loss(&self, batch: &Batch, noise: &Tensor) -> Result<LossParts> {
        let unlabeled = ModelState {
            config: super::ModelConfig {
                labeled: false,
                ..self.config.clone()
            },
            ..self.clone()
        };
        let b = Batch {
            y: None,
            ..batch.clone()
        };
        unlabeled.total_loss(&b, None, std::slice::from_ref(noise))
    }
}

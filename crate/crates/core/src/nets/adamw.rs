use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        let v = m.clone();
        Self { config, m, v, t: 0 }
    }

    /// One update. `names` is used only for error messages.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{} params / {} grads for {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("parameter {}: {:?} vs gradient {:?}", name(i), p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::non_finite(format!("gradient of parameter {}", name(i))));
            }
        }

        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pv, &gv), (mv, vv)) in it {
                *pv *= decay;
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

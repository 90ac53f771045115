//! Per-domain componentwise monotonic flows `z_s = f_u(z~_s)`.

mod bank;
mod spline;

pub use bank::{BoundBank, FlowBank};
pub use spline::{Knots, SplineParams, MIN_BIN_FRACTION, MIN_DERIVATIVE, MIN_LAMBDA};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};

/// Per-domain affine flows `z = shift + exp(log_scale) * z~`. This is the
/// family the synthetic generator uses, so it serves as a ground-truth flow
/// that can be dropped into a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineBank {
    pub domains: usize,
    pub n_style: usize,
    /// `[d, n_s]`
    pub shift: Tensor,
    /// `[d, n_s]`
    pub log_scale: Tensor,
}

impl AffineBank {
    pub fn new(shift: Tensor, log_scale: Tensor) -> Result<Self> {
        if shift.ndim() != 2 || shift.shape() != log_scale.shape() {
            return Err(Error::shape(
                "affine_bank",
                format!("shift {:?}, log_scale {:?}", shift.shape(), log_scale.shape()),
            ));
        }
        Ok(Self {
            domains: shift.rows(),
            n_style: shift.cols(),
            shift,
            log_scale,
        })
    }

    fn check(&self, u: usize, len: usize) -> Result<()> {
        if u >= self.domains {
            return Err(Error::UnknownDomain {
                id: u,
                count: self.domains,
            });
        }
        if len != self.n_style {
            return Err(Error::shape(
                "affine_bank",
                format!("{len} values for {} style components", self.n_style),
            ));
        }
        Ok(())
    }

    pub fn inverse(&self, u: usize, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(u, z.len())?;
        let (s, l) = (self.shift.row(u), self.log_scale.row(u));
        let out = (0..z.len()).map(|i| (z[i] - s[i]) * (-l[i]).exp()).collect();
        Ok((out, -l.iter().sum::<f64>()))
    }

    pub fn forward(&self, u: usize, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(u, z.len())?;
        let (s, l) = (self.shift.row(u), self.log_scale.row(u));
        let out = (0..z.len()).map(|i| s[i] + l[i].exp() * z[i]).collect();
        Ok((out, l.iter().sum::<f64>()))
    }
}

/// The flow family attached to a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DomainFlows {
    Spline(FlowBank),
    Affine(AffineBank),
}

/// [`DomainFlows`] bound into a graph.
#[derive(Debug, Clone)]
pub enum BoundFlows {
    Spline(BoundBank),
    Affine {
        shift: Var,
        log_scale: Var,
        n_style: usize,
        domains: usize,
    },
}

impl DomainFlows {
    pub fn domains(&self) -> usize {
        match self {
            DomainFlows::Spline(b) => b.domains,
            DomainFlows::Affine(a) => a.domains,
        }
    }

    pub fn n_style(&self) -> usize {
        match self {
            DomainFlows::Spline(b) => b.n_style,
            DomainFlows::Affine(a) => a.n_style,
        }
    }

    pub fn inverse(&self, u: usize, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        match self {
            DomainFlows::Spline(b) => b.inverse(u, z),
            DomainFlows::Affine(a) => a.inverse(u, z),
        }
    }

    pub fn forward(&self, u: usize, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        match self {
            DomainFlows::Spline(b) => b.forward(u, z),
            DomainFlows::Affine(a) => a.forward(u, z),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            DomainFlows::Spline(b) => b.params().to_vec(),
            DomainFlows::Affine(a) => vec![&a.shift, &a.log_scale],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            DomainFlows::Spline(b) => b.params_mut().into_iter().collect(),
            DomainFlows::Affine(a) => vec![&mut a.shift, &mut a.log_scale],
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            DomainFlows::Spline(_) => vec!["widths", "heights", "derivatives", "lambdas"],
            DomainFlows::Affine(_) => vec!["shift", "log_scale"],
        }
    }

    /// Builds the flow graph on top of existing leaves in [`Self::params`]
    /// order.
    pub fn bind_leaves(&self, g: &mut Graph, leaves: &[Var]) -> Result<BoundFlows> {
        let expected = self.params();
        if leaves.len() != expected.len() || leaves.iter().zip(&expected).any(|(v, t)| g.shape(*v) != t.shape()) {
            return Err(Error::shape(
                "flows_bind",
                format!("{} leaves for {} flow parameters", leaves.len(), expected.len()),
            ));
        }
        Ok(match self {
            DomainFlows::Spline(b) => {
                BoundFlows::Spline(b.bind_leaves(g, [leaves[0], leaves[1], leaves[2], leaves[3]])?)
            }
            DomainFlows::Affine(a) => BoundFlows::Affine {
                shift: leaves[0],
                log_scale: leaves[1],
                n_style: a.n_style,
                domains: a.domains,
            },
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundFlows> {
        Ok(match self {
            DomainFlows::Spline(b) => BoundFlows::Spline(b.bind(g, trainable)?),
            DomainFlows::Affine(a) => {
                let (shift, log_scale) = if trainable {
                    (g.param(a.shift.clone()), g.param(a.log_scale.clone()))
                } else {
                    (g.constant(a.shift.clone()), g.constant(a.log_scale.clone()))
                };
                BoundFlows::Affine {
                    shift,
                    log_scale,
                    n_style: a.n_style,
                    domains: a.domains,
                }
            }
        })
    }
}

impl BoundFlows {
    /// Parameter leaves in [`DomainFlows::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        match self {
            BoundFlows::Spline(b) => b.pre.to_vec(),
            BoundFlows::Affine { shift, log_scale, .. } => vec![*shift, *log_scale],
        }
    }

    /// Inverse flow on a `[b, n_s]` batch; returns `(z~_s, logdet_inv [b, 1])`.
    pub fn inverse(&self, g: &mut Graph, z: Var, domains: &[usize]) -> Result<(Var, Var)> {
        match self {
            BoundFlows::Spline(b) => b.inverse(g, z, domains),
            BoundFlows::Affine {
                shift,
                log_scale,
                n_style,
                domains: count,
            } => {
                let ns = *n_style;
                let shape = g.shape(z).to_vec();
                if shape.len() != 2 || shape[1] != ns || shape[0] != domains.len() {
                    return Err(Error::shape(
                        "affine_inverse",
                        format!("input {shape:?} with {} domain ids", domains.len()),
                    ));
                }
                if let Some(&u) = domains.iter().find(|&&u| u >= *count) {
                    return Err(Error::UnknownDomain { id: u, count: *count });
                }
                let b = shape[0];
                let idx: Vec<usize> = (0..b * ns).map(|e| domains[e / ns] * ns + e % ns).collect();
                let s = g.gather(*shift, &idx)?;
                let l = g.gather(*log_scale, &idx)?;
                let s = g.reshape(s, &[b, ns])?;
                let l = g.reshape(l, &[b, ns])?;
                let centered = g.sub(z, s)?;
                let nl = g.neg(l);
                let inv_scale = g.exp(nl);
                let out = g.mul(centered, inv_scale)?;
                let ones = g.constant(Tensor::ones(&[ns, 1]));
                let ld = g.matmul(nl, ones)?;
                Ok((out, ld))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_roundtrip() {
        let a = AffineBank::new(
            Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.1, -0.4], vec![-1.0, 0.2]]).unwrap(),
        )
        .unwrap();
        let (z, l) = a.forward(1, &[0.3, -0.7]).unwrap();
        let (zt, li) = a.inverse(1, &z).unwrap();
        assert!((zt[0] - 0.3).abs() < 1e-12 && (zt[1] + 0.7).abs() < 1e-12);
        assert!((l + li).abs() < 1e-15);

        let flows = DomainFlows::Affine(a.clone());
        let mut g = Graph::new();
        let bf = flows.bind(&mut g, true).unwrap();
        let x = g.constant(Tensor::matrix(2, 2, vec![z[0], z[1], 0.5, 3.0]).unwrap());
        let (out, ld) = bf.inverse(&mut g, x, &[1, 1]).unwrap();
        assert!((g.value(out).at(0, 0) - 0.3).abs() < 1e-12);
        assert!(g.value(out).at(1, 0).abs() < 1e-12);
        assert!((g.value(ld).at(0, 0) - li).abs() < 1e-12);
    }
}

use serde::{Deserialize, Serialize};

use super::spline::{derivative_shift, find_bin, Knots, SplineParams, MIN_BIN_FRACTION, MIN_DERIVATIVE, MIN_LAMBDA};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};

/// Per-domain, per-style-component spline parameters. Row `u * n_style + i`
/// of each pre-parameter matrix belongs to domain `u`, component `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBank {
    pub domains: usize,
    pub n_style: usize,
    pub bins: usize,
    pub bound: f64,
    /// `[d * n_s, K]`
    pub widths: Tensor,
    /// `[d * n_s, K]`
    pub heights: Tensor,
    /// `[d * n_s, K - 1]`
    pub derivatives: Tensor,
    /// `[d * n_s, K]`
    pub lambdas: Tensor,
}

impl FlowBank {
    pub fn identity(domains: usize, n_style: usize, bins: usize, bound: f64) -> Result<Self> {
        SplineParams::identity(bins, bound)?;
        if domains == 0 {
            return Err(Error::InvalidArgument("flow bank needs at least one domain".into()));
        }
        let rows = domains * n_style;
        Ok(Self {
            domains,
            n_style,
            bins,
            bound,
            widths: Tensor::zeros(&[rows, bins]),
            heights: Tensor::zeros(&[rows, bins]),
            derivatives: Tensor::zeros(&[rows, bins - 1]),
            lambdas: Tensor::zeros(&[rows, bins]),
        })
    }

    fn check_domain(&self, u: usize) -> Result<()> {
        if u >= self.domains {
            return Err(Error::UnknownDomain {
                id: u,
                count: self.domains,
            });
        }
        Ok(())
    }

    pub fn spline(&self, u: usize, i: usize) -> Result<SplineParams> {
        self.check_domain(u)?;
        let r = u * self.n_style + i;
        Ok(SplineParams {
            bound: self.bound,
            widths: self.widths.row(r).to_vec(),
            heights: self.heights.row(r).to_vec(),
            derivatives: self.derivatives.row(r).to_vec(),
            lambdas: self.lambdas.row(r).to_vec(),
        })
    }

    pub fn set_spline(&mut self, u: usize, i: usize, s: &SplineParams) -> Result<()> {
        self.check_domain(u)?;
        s.validate()?;
        if s.bins() != self.bins || s.bound != self.bound {
            return Err(Error::InvalidArgument(format!(
                "spline has {} bins / bound {}, bank uses {} / {}",
                s.bins(),
                s.bound,
                self.bins,
                self.bound
            )));
        }
        let r = u * self.n_style + i;
        let set = |t: &mut Tensor, v: &[f64]| {
            let c = t.cols();
            t.data_mut()[r * c..(r + 1) * c].copy_from_slice(v);
        };
        set(&mut self.widths, &s.widths);
        set(&mut self.heights, &s.heights);
        set(&mut self.derivatives, &s.derivatives);
        set(&mut self.lambdas, &s.lambdas);
        Ok(())
    }

    fn knots(&self, u: usize) -> Result<Vec<Knots>> {
        (0..self.n_style).map(|i| Ok(self.spline(u, i)?.knots())).collect()
    }

    fn apply(&self, u: usize, z: &[f64], inverse: bool) -> Result<(Vec<f64>, f64)> {
        if z.len() != self.n_style {
            return Err(Error::shape(
                "bank",
                format!("{} values for {} style components", z.len(), self.n_style),
            ));
        }
        let knots = self.knots(u)?;
        let mut out = Vec::with_capacity(z.len());
        let mut logdet = 0.0;
        for (k, &v) in knots.iter().zip(z) {
            let (y, ld) = if inverse { k.inverse(v)? } else { k.forward(v)? };
            out.push(y);
            logdet += ld;
        }
        Ok((out, logdet))
    }

    /// Componentwise inverse for domain `u`; the log-determinant is the sum
    /// of the per-component inverse log-derivatives.
    pub fn inverse(&self, u: usize, z_style: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.apply(u, z_style, true)
    }

    pub fn forward(&self, u: usize, z_generic: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.apply(u, z_generic, false)
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.widths, &self.heights, &self.derivatives, &self.lambdas]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.widths,
            &mut self.heights,
            &mut self.derivatives,
            &mut self.lambdas,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundBank> {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let pre = [
            leaf(g, &self.widths),
            leaf(g, &self.heights),
            leaf(g, &self.derivatives),
            leaf(g, &self.lambdas),
        ];
        self.bind_leaves(g, pre)
    }

    /// Builds the knot graph on top of existing pre-parameter leaves, given
    /// in [`FlowBank::params`] order.
    pub fn bind_leaves(&self, g: &mut Graph, pre: [Var; 4]) -> Result<BoundBank> {
        for (v, t) in pre.iter().zip(self.params()) {
            if g.shape(*v) != t.shape() {
                return Err(Error::shape(
                    "flow_bank_bind",
                    format!("leaf {:?} for parameter {:?}", g.shape(*v), t.shape()),
                ));
            }
        }
        let rows = self.domains * self.n_style;
        let k = self.bins;
        let xs = realize_knots(g, pre[0], k, self.bound)?;
        let ys = realize_knots(g, pre[1], k, self.bound)?;

        let shifted = g.add_scalar(pre[2], derivative_shift());
        let sp = g.softplus(shifted);
        let inner = g.add_scalar(sp, MIN_DERIVATIVE);
        let edge = g.constant(Tensor::ones(&[rows, 1]));
        let ds = g.concat(&[edge, inner, edge])?;

        let sg = g.sigmoid(pre[3]);
        let sc = g.scale(sg, 1.0 - 2.0 * MIN_LAMBDA);
        let lambdas = g.add_scalar(sc, MIN_LAMBDA);

        Ok(BoundBank {
            pre,
            xs,
            ys,
            ds,
            lambdas,
            domains: self.domains,
            n_style: self.n_style,
            bins: k,
            bound: self.bound,
        })
    }
}

/// `[rows, K]` pre-parameters to `[rows, K + 1]` knot positions on `[-B, B]`.
fn realize_knots(g: &mut Graph, pre: Var, bins: usize, bound: f64) -> Result<Var> {
    let sp = g.softplus(pre);
    let ones = g.constant(Tensor::ones(&[bins, bins]));
    let total = g.matmul(sp, ones)?;
    let frac = g.div(sp, total)?;
    let span = 2.0 * bound;
    let scaled = g.scale(frac, span * (1.0 - bins as f64 * MIN_BIN_FRACTION));
    let w = g.add_scalar(scaled, span * MIN_BIN_FRACTION);
    let mut tri = Tensor::zeros(&[bins, bins + 1]);
    for i in 0..bins {
        for j in i + 1..=bins {
            tri.data_mut()[i * (bins + 1) + j] = 1.0;
        }
    }
    let tri = g.constant(tri);
    let cum = g.matmul(w, tri)?;
    Ok(g.add_scalar(cum, -bound))
}

/// A [`FlowBank`] realized inside a graph.
#[derive(Debug, Clone)]
pub struct BoundBank {
    /// Pre-parameter leaves in [`FlowBank::params`] order.
    pub pre: [Var; 4],
    xs: Var,
    ys: Var,
    ds: Var,
    lambdas: Var,
    domains: usize,
    n_style: usize,
    bins: usize,
    bound: f64,
}

impl BoundBank {
    pub fn inverse(&self, g: &mut Graph, z: Var, domains: &[usize]) -> Result<(Var, Var)> {
        self.transform(g, z, domains, true)
    }

    pub fn forward(&self, g: &mut Graph, z: Var, domains: &[usize]) -> Result<(Var, Var)> {
        self.transform(g, z, domains, false)
    }

    /// Applies each row's domain spline to a `[b, n_s]` batch. Returns the
    /// transformed batch and the per-row log-determinant `[b, 1]`.
    fn transform(&self, g: &mut Graph, z: Var, domains: &[usize], inverse: bool) -> Result<(Var, Var)> {
        let ns = self.n_style;
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != ns || shape[0] != domains.len() {
            return Err(Error::shape(
                "bank_transform",
                format!("input {shape:?}, {} domain ids, {ns} style components", domains.len()),
            ));
        }
        if let Some(&u) = domains.iter().find(|&&u| u >= self.domains) {
            return Err(Error::UnknownDomain {
                id: u,
                count: self.domains,
            });
        }
        let b = shape[0];
        let n = b * ns;
        let k = self.bins;
        let flat = g.reshape(z, &[n])?;
        let values = g.value(flat).data().to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("flow input"));
        }
        let search = if inverse { self.ys } else { self.xs };
        let search_v = g.value(search).data().to_vec();

        let mut inside = Vec::with_capacity(n);
        let mut ia = Vec::with_capacity(n);
        let mut ib = Vec::with_capacity(n);
        let mut il = Vec::with_capacity(n);
        for (e, &v) in values.iter().enumerate() {
            let key = domains[e / ns] * ns + e % ns;
            let inn = v > -self.bound && v < self.bound;
            let row = &search_v[key * (k + 1)..(key + 1) * (k + 1)];
            let bin = if inn { find_bin(row, v) } else { 0 };
            inside.push(inn);
            ia.push(key * (k + 1) + bin);
            ib.push(key * (k + 1) + bin + 1);
            il.push(key * k + bin);
        }

        let xa = g.gather(self.xs, &ia)?;
        let xb = g.gather(self.xs, &ib)?;
        let ya = g.gather(self.ys, &ia)?;
        let yb = g.gather(self.ys, &ib)?;
        let da = g.gather(self.ds, &ia)?;
        let db = g.gather(self.ds, &ib)?;
        let lam = g.gather(self.lambdas, &il)?;

        let width = g.sub(xb, xa)?;
        let height = g.sub(yb, ya)?;
        let slope = g.div(height, width)?;
        let ratio = g.div(da, db)?;
        let wb = g.sqrt(ratio);
        let neg_lam = g.neg(lam);
        let one_m_lam = g.add_scalar(neg_lam, 1.0);
        // wc = (lam da + (1 - lam) wb db) / slope
        let t1 = g.mul(lam, da)?;
        let wb_db = g.mul(wb, db)?;
        let t2 = g.mul(one_m_lam, wb_db)?;
        let wc_num = g.add(t1, t2)?;
        let wc = g.div(wc_num, slope)?;
        // yc = ((1 - lam) ya + lam wb yb) / ((1 - lam) + lam wb)
        let a1 = g.mul(one_m_lam, ya)?;
        let lam_wb = g.mul(lam, wb)?;
        let a2 = g.mul(lam_wb, yb)?;
        let yc_num = g.add(a1, a2)?;
        let yc_den = g.add(one_m_lam, lam_wb)?;
        let yc = g.div(yc_num, yc_den)?;

        let yc_minus_ya = g.sub(yc, ya)?;
        let yb_minus_yc = g.sub(yb, yc)?;
        let wc_lam = g.mul(wc, lam)?;
        let wb_wc = g.mul(wb, wc)?;
        let wb_wc_1ml = g.mul(wb_wc, one_m_lam)?;
        let dn_left0 = g.mul(wc_lam, yc_minus_ya)?;
        let dn_right0 = g.mul(wb_wc_1ml, yb_minus_yc)?;

        let anchor = if inverse { ya } else { xa };
        let zin = g.where_(&inside, flat, anchor)?;

        let (out, den, dn) = if inverse {
            let ycv = g.value(yc).data();
            let zv = g.value(zin).data();
            let left: Vec<bool> = zv.iter().zip(ycv).map(|(y, c)| y <= c).collect();
            // left piece
            let ya_m_y = g.sub(ya, zin)?;
            let num_l = g.mul(lam, ya_m_y)?;
            let wc_m1 = g.add_scalar(wc, -1.0);
            let l1 = g.mul(wc_m1, zin)?;
            let wc_yc = g.mul(wc, yc)?;
            let l2 = g.sub(ya, wc_yc)?;
            let den_l = g.add(l1, l2)?;
            // right piece
            let lam_wb_yb = g.mul(lam_wb, yb)?;
            let c_r = g.sub(lam_wb_yb, wc_yc)?;
            let wc_m_lwb = g.sub(wc, lam_wb)?;
            let r1 = g.mul(wc_m_lwb, zin)?;
            let num_r = g.add(r1, c_r)?;
            let wc_m_wb = g.sub(wc, wb)?;
            let r2 = g.mul(wc_m_wb, zin)?;
            let wb_yb = g.mul(wb, yb)?;
            let r3 = g.sub(wb_yb, wc_yc)?;
            let den_r = g.add(r2, r3)?;

            let num = g.where_(&left, num_l, num_r)?;
            let den = g.where_(&left, den_l, den_r)?;
            let dn0 = g.where_(&left, dn_left0, dn_right0)?;
            let dn = g.mul(dn0, width)?;
            let t = g.div(num, den)?;
            let tw = g.mul(t, width)?;
            let out = g.add(tw, xa)?;
            (out, den, dn)
        } else {
            let dz = g.sub(zin, xa)?;
            let t = g.div(dz, width)?;
            let tv = g.value(t).data();
            let lv = g.value(lam).data();
            let left: Vec<bool> = tv.iter().zip(lv).map(|(t, l)| t <= l).collect();
            let lam_m_t = g.sub(lam, t)?;
            let neg_t = g.neg(t);
            let one_m_t = g.add_scalar(neg_t, 1.0);
            let t_m_lam = g.sub(t, lam)?;
            let wc_yc = g.mul(wc, yc)?;
            // left piece
            let l1 = g.mul(ya, lam_m_t)?;
            let l2 = g.mul(wc_yc, t)?;
            let num_l = g.add(l1, l2)?;
            let wc_t = g.mul(wc, t)?;
            let den_l = g.add(lam_m_t, wc_t)?;
            // right piece
            let r1 = g.mul(wc_yc, one_m_t)?;
            let wb_yb = g.mul(wb, yb)?;
            let r2 = g.mul(wb_yb, t_m_lam)?;
            let num_r = g.add(r1, r2)?;
            let r3 = g.mul(wc, one_m_t)?;
            let r4 = g.mul(wb, t_m_lam)?;
            let den_r = g.add(r3, r4)?;

            let num = g.where_(&left, num_l, num_r)?;
            let den = g.where_(&left, den_l, den_r)?;
            let dn0 = g.where_(&left, dn_left0, dn_right0)?;
            let dn = g.div(dn0, width)?;
            let out = g.div(num, den)?;
            (out, den, dn)
        };

        let log_dn = g.log(dn);
        let den2 = g.square(den);
        let log_den2 = g.log(den2);
        let ld = g.sub(log_dn, log_den2)?;

        let zeros = g.constant(Tensor::zeros(&[n]));
        let out = g.where_(&inside, out, flat)?;
        let ld = g.where_(&inside, ld, zeros)?;
        let out = g.reshape(out, &[b, ns])?;
        let ld = g.reshape(ld, &[b, ns])?;
        let ones = g.constant(Tensor::ones(&[ns, 1]));
        let row_ld = g.matmul(ld, ones)?;
        Ok((out, row_ld))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn random_bank(seed: u64, domains: usize, ns: usize) -> FlowBank {
        let mut r = crate::rng::seeded(seed);
        let mut bank = FlowBank::identity(domains, ns, 8, 5.0).unwrap();
        for p in bank.params_mut() {
            for v in p.data_mut() {
                *v = r.random_range(-1.5..1.5);
            }
        }
        bank
    }

    #[test]
    fn identity_bank_is_identity() {
        let bank = FlowBank::identity(3, 2, 8, 5.0).unwrap();
        let (z, ld) = bank.inverse(2, &[0.3, -4.1]).unwrap();
        assert!((z[0] - 0.3).abs() < 1e-12 && (z[1] + 4.1).abs() < 1e-12);
        assert!(ld.abs() < 1e-12);
    }

    #[test]
    fn unknown_domain_rejected() {
        let bank = FlowBank::identity(3, 2, 8, 5.0).unwrap();
        assert!(matches!(
            bank.inverse(3, &[0.0, 0.0]),
            Err(Error::UnknownDomain { id: 3, count: 3 })
        ));
    }

    #[test]
    fn bank_is_componentwise() {
        let bank = random_bank(5, 2, 2);
        let z = [1.3, -2.2];
        let (out, ld) = bank.inverse(1, &z).unwrap();
        let (a, la) = bank.spline(1, 0).unwrap().inverse(z[0]).unwrap();
        let (b, lb) = bank.spline(1, 1).unwrap().inverse(z[1]).unwrap();
        assert_eq!(out, vec![a, b]);
        assert!((ld - (la + lb)).abs() < 1e-15);
    }

    #[test]
    fn graph_route_matches_scalar_route() {
        let bank = random_bank(6, 3, 2);
        let mut r = crate::rng::seeded(7);
        let b = 40;
        let domains: Vec<usize> = (0..b).map(|i| i % 3).collect();
        let data: Vec<f64> = (0..b * 2).map(|_| r.random_range(-6.0..6.0)).collect();
        for inverse in [false, true] {
            let mut g = Graph::new();
            let bound = bank.bind(&mut g, true).unwrap();
            let z = g.constant(Tensor::matrix(b, 2, data.clone()).unwrap());
            let (out, ld) = if inverse {
                bound.inverse(&mut g, z, &domains).unwrap()
            } else {
                bound.forward(&mut g, z, &domains).unwrap()
            };
            for row in 0..b {
                let zr = &data[row * 2..row * 2 + 2];
                let (o, l) = if inverse {
                    bank.inverse(domains[row], zr).unwrap()
                } else {
                    bank.forward(domains[row], zr).unwrap()
                };
                for (i, oi) in o.iter().enumerate() {
                    assert!((g.value(out).at(row, i) - oi).abs() < 1e-10);
                }
                assert!((g.value(ld).at(row, 0) - l).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn graph_rejects_bad_domain() {
        let bank = FlowBank::identity(2, 1, 4, 2.0).unwrap();
        let mut g = Graph::new();
        let bound = bank.bind(&mut g, true).unwrap();
        let z = g.constant(Tensor::zeros(&[2, 1]));
        assert!(bound.inverse(&mut g, z, &[0, 2]).is_err());
    }
}

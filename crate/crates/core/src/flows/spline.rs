//! Monotonic linear-rational splines on `[-B, B]` with identity tails.
//!
//! Each bin `[x_k, x_{k+1}] -> [y_k, y_{k+1}]` is split at a fraction
//! `lambda_k` of its width into two linear-rational pieces that meet at an
//! interior point `y_c`. With weights `w_a = 1`, `w_b = sqrt(d_k / d_{k+1})`
//! and `w_c = (lambda d_k + (1 - lambda) w_b d_{k+1}) / s_k` (`s_k` the bin
//! slope), the pieces are continuous, hit the knot derivatives `d_k` and
//! `d_{k+1}`, and have closed-form inverses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{sigmoid, softplus};

/// Smallest bin width / height as a fraction of `2B`.
pub const MIN_BIN_FRACTION: f64 = 1e-3;
/// Floor on interior knot derivatives.
pub const MIN_DERIVATIVE: f64 = 1e-3;
/// `lambda` is confined to `[MIN_LAMBDA, 1 - MIN_LAMBDA]`.
pub const MIN_LAMBDA: f64 = 0.025;

/// Shift applied before the softplus so a zero pre-parameter yields a unit
/// derivative.
pub fn derivative_shift() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

pub(crate) fn realize_derivative(pre: f64) -> f64 {
    MIN_DERIVATIVE + softplus(pre + derivative_shift())
}

pub(crate) fn realize_lambda(pre: f64) -> f64 {
    MIN_LAMBDA + (1.0 - 2.0 * MIN_LAMBDA) * sigmoid(pre)
}

/// Unconstrained parameters of one component-wise spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineParams {
    pub bound: f64,
    /// `K` bin-width pre-parameters.
    pub widths: Vec<f64>,
    /// `K` bin-height pre-parameters.
    pub heights: Vec<f64>,
    /// `K - 1` interior derivative pre-parameters.
    pub derivatives: Vec<f64>,
    /// `K` split-point pre-parameters.
    pub lambdas: Vec<f64>,
}

/// Realized knots of a spline.
#[derive(Debug, Clone, PartialEq)]
pub struct Knots {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub ds: Vec<f64>,
    pub lambdas: Vec<f64>,
}

fn cumulative_knots(pre: &[f64], bound: f64) -> Vec<f64> {
    let k = pre.len() as f64;
    let sp: Vec<f64> = pre.iter().map(|&v| softplus(v)).collect();
    let total: f64 = sp.iter().sum();
    let mut knots = Vec::with_capacity(pre.len() + 1);
    let mut acc = -bound;
    knots.push(acc);
    for s in sp {
        acc += 2.0 * bound * (MIN_BIN_FRACTION + (1.0 - k * MIN_BIN_FRACTION) * s / total);
        knots.push(acc);
    }
    knots
}

impl SplineParams {
    /// Parameters whose realized spline is the identity on the real line:
    /// uniform bins, unit derivatives, `lambda = 1/2`.
    pub fn identity(bins: usize, bound: f64) -> Result<Self> {
        if bins == 0 || !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "spline needs bins >= 1 and a finite bound > 0 (got {bins}, {bound})"
            )));
        }
        Ok(Self {
            bound,
            widths: vec![0.0; bins],
            heights: vec![0.0; bins],
            derivatives: vec![0.0; bins - 1],
            lambdas: vec![0.0; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.bins();
        if k == 0 || self.heights.len() != k || self.lambdas.len() != k || self.derivatives.len() + 1 != k {
            return Err(Error::shape(
                "spline",
                format!(
                    "widths {}, heights {}, derivatives {}, lambdas {}",
                    k,
                    self.heights.len(),
                    self.derivatives.len(),
                    self.lambdas.len()
                ),
            ));
        }
        let all = self
            .widths
            .iter()
            .chain(&self.heights)
            .chain(&self.derivatives)
            .chain(&self.lambdas);
        if !(self.bound > 0.0) || all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("spline parameters"));
        }
        Ok(())
    }

    pub fn knots(&self) -> Knots {
        let mut ds = Vec::with_capacity(self.bins() + 1);
        ds.push(1.0);
        ds.extend(self.derivatives.iter().map(|&d| realize_derivative(d)));
        ds.push(1.0);
        Knots {
            xs: cumulative_knots(&self.widths, self.bound),
            ys: cumulative_knots(&self.heights, self.bound),
            ds,
            lambdas: self.lambdas.iter().map(|&l| realize_lambda(l)).collect(),
        }
    }

    /// `(f(x), log f'(x))`.
    pub fn forward(&self, x: f64) -> Result<(f64, f64)> {
        self.knots().forward(x)
    }

    /// `(f^{-1}(y), log (f^{-1})'(y))`.
    pub fn inverse(&self, y: f64) -> Result<(f64, f64)> {
        self.knots().inverse(y)
    }
}

/// Index of the bin holding `v`; a value on an interior knot belongs to the
/// bin on its left.
pub(crate) fn find_bin(knots: &[f64], v: f64) -> usize {
    let bins = knots.len() - 1;
    knots[1..bins].partition_point(|&t| t < v)
}

/// Per-bin quantities shared by forward and inverse.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub xa: f64,
    pub width: f64,
    pub ya: f64,
    pub yb: f64,
    pub yc: f64,
    pub wb: f64,
    pub wc: f64,
    pub lambda: f64,
}

impl Segment {
    pub fn new(xa: f64, xb: f64, ya: f64, yb: f64, da: f64, db: f64, lambda: f64) -> Self {
        let width = xb - xa;
        let slope = (yb - ya) / width;
        let wb = (da / db).sqrt();
        let wc = (lambda * da + (1.0 - lambda) * wb * db) / slope;
        let yc = ((1.0 - lambda) * ya + lambda * wb * yb) / ((1.0 - lambda) + lambda * wb);
        Self {
            xa,
            width,
            ya,
            yb,
            yc,
            wb,
            wc,
            lambda,
        }
    }

    pub fn forward(&self, x: f64) -> (f64, f64) {
        let Segment {
            width,
            ya,
            yb,
            yc,
            wb,
            wc,
            lambda: l,
            ..
        } = *self;
        let t = (x - self.xa) / width;
        let (num, den, dnum) = if t <= l {
            (ya * (l - t) + wc * yc * t, (l - t) + wc * t, wc * l * (yc - ya) / width)
        } else {
            (
                wc * yc * (1.0 - t) + wb * yb * (t - l),
                wc * (1.0 - t) + wb * (t - l),
                wb * wc * (1.0 - l) * (yb - yc) / width,
            )
        };
        (num / den, dnum.ln() - 2.0 * den.abs().ln())
    }

    pub fn inverse(&self, y: f64) -> (f64, f64) {
        let Segment {
            width,
            ya,
            yb,
            yc,
            wb,
            wc,
            lambda: l,
            ..
        } = *self;
        let (num, den, dnum) = if y <= yc {
            (l * (ya - y), (wc - 1.0) * y + ya - wc * yc, wc * l * (yc - ya) * width)
        } else {
            (
                (wc - l * wb) * y + l * wb * yb - wc * yc,
                (wc - wb) * y + wb * yb - wc * yc,
                wb * wc * (1.0 - l) * (yb - yc) * width,
            )
        };
        let t = num / den;
        (t * width + self.xa, dnum.ln() - 2.0 * den.abs().ln())
    }
}

impl Knots {
    pub fn bins(&self) -> usize {
        self.lambdas.len()
    }

    pub fn bound(&self) -> f64 {
        -self.xs[0]
    }

    pub(crate) fn segment(&self, k: usize) -> Segment {
        Segment::new(
            self.xs[k],
            self.xs[k + 1],
            self.ys[k],
            self.ys[k + 1],
            self.ds[k],
            self.ds[k + 1],
            self.lambdas[k],
        )
    }

    pub fn forward(&self, x: f64) -> Result<(f64, f64)> {
        if !x.is_finite() {
            return Err(Error::non_finite("spline_forward input"));
        }
        let b = self.bound();
        if x <= -b || x >= b {
            return Ok((x, 0.0));
        }
        Ok(self.segment(find_bin(&self.xs, x)).forward(x))
    }

    pub fn inverse(&self, y: f64) -> Result<(f64, f64)> {
        if !y.is_finite() {
            return Err(Error::non_finite("spline_inverse input"));
        }
        let b = self.bound();
        if y <= -b || y >= b {
            return Ok((y, 0.0));
        }
        Ok(self.segment(find_bin(&self.ys, y)).inverse(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spline(r: &mut impl Rng, bins: usize, bound: f64) -> SplineParams {
        let mut v = |n: usize| (0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>();
        SplineParams {
            bound,
            widths: v(bins),
            heights: v(bins),
            derivatives: v(bins - 1),
            lambdas: v(bins),
        }
    }

    #[test]
    fn identity_spline_is_identity() {
        let s = SplineParams::identity(8, 5.0).unwrap();
        let (y, ld) = s.forward(0.7).unwrap();
        assert!((y - 0.7).abs() < 1e-12);
        assert!(ld.abs() < 1e-12);
        for x in [-4.99, -3.2, -1.25, 0.0, 2.5, 4.2] {
            let (y, ld) = s.forward(x).unwrap();
            assert!((y - x).abs() < 1e-12, "{x} -> {y}");
            assert!(ld.abs() < 1e-12);
        }
        let (x, ld) = s.inverse(-3.2).unwrap();
        assert!((x + 3.2).abs() < 1e-12 && ld.abs() < 1e-12);
    }

    #[test]
    fn single_bin_tail_is_linear() {
        let s = SplineParams::identity(1, 1.0).unwrap();
        assert_eq!(s.forward(2.0).unwrap(), (2.0, 0.0));
        assert_eq!(s.inverse(-7.5).unwrap(), (-7.5, 0.0));
    }

    #[test]
    fn bad_construction_rejected() {
        assert!(SplineParams::identity(0, 5.0).is_err());
        assert!(SplineParams::identity(8, 0.0).is_err());
        let mut s = SplineParams::identity(4, 1.0).unwrap();
        s.derivatives.push(0.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let s = SplineParams::identity(8, 5.0).unwrap();
        assert!(s.forward(f64::NAN).is_err());
        assert!(s.inverse(f64::INFINITY).is_err());
    }

    #[test]
    fn knots_span_the_bound() {
        let mut r = crate::rng::seeded(1);
        let s = random_spline(&mut r, 8, 5.0);
        let k = s.knots();
        assert_eq!(k.xs.len(), 9);
        assert!((k.xs[8] - 5.0).abs() < 1e-12 && (k.ys[8] - 5.0).abs() < 1e-12);
        assert!(k.xs.windows(2).all(|w| w[1] > w[0]));
        assert!(k.ds.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn interior_knot_ties_go_left() {
        let xs = [-1.0, 0.0, 1.0];
        assert_eq!(find_bin(&xs, 0.0), 0);
        assert_eq!(find_bin(&xs, 1e-12), 1);
        assert_eq!(find_bin(&xs, -1.0), 0);
    }

    #[test]
    fn matches_knot_values_and_slopes() {
        let mut r = crate::rng::seeded(2);
        let s = random_spline(&mut r, 6, 3.0);
        let k = s.knots();
        for j in 1..6 {
            let (y, ld) = k.forward(k.xs[j]).unwrap();
            assert!((y - k.ys[j]).abs() < 1e-10);
            assert!((ld - k.ds[j].ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn derivative_matches_central_difference() {
        let mut r = crate::rng::seeded(3);
        for _ in 0..20 {
            let s = random_spline(&mut r, 8, 5.0);
            let k = s.knots();
            for _ in 0..50 {
                let x: f64 = r.random_range(-4.9..4.9);
                let h = 1e-6;
                let fd = (k.forward(x + h).unwrap().0 - k.forward(x - h).unwrap().0) / (2.0 * h);
                let an = k.forward(x).unwrap().1.exp();
                assert!((fd - an).abs() / an < 1e-4, "x={x} fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn roundtrip_and_inverse_log_derivative() {
        let mut r = crate::rng::seeded(4);
        let s = random_spline(&mut r, 8, 5.0);
        let k = s.knots();
        for _ in 0..1000 {
            let x: f64 = r.random_range(-5.0..5.0);
            let (y, ld) = k.forward(x).unwrap();
            let (x2, ldi) = k.inverse(y).unwrap();
            assert!((x - x2).abs() < 1e-9, "{x} vs {x2}");
            assert!((ld + ldi).abs() < 1e-9);
        }
    }
}

use imsda_core::flows::{FlowBank, SplineParams};
use imsda_core::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const BINS: usize = 8;
const BOUND: f64 = 5.0;

fn random_spline(r: &mut impl Rng) -> SplineParams {
    let n = Normal::new(0.0, 1.5).unwrap();
    let mut draw = |k: usize| (0..k).map(|_| n.sample(r)).collect::<Vec<f64>>();
    SplineParams {
        bound: BOUND,
        widths: draw(BINS),
        heights: draw(BINS),
        derivatives: draw(BINS - 1),
        lambdas: draw(BINS),
    }
}

struct Worst {
    roundtrip: f64,
    slope: f64,
    monotone: bool,
}

fn sweep(splines: usize, points: usize, seed: u64) -> Worst {
    let mut w = Worst {
        roundtrip: 0.0,
        slope: 0.0,
        monotone: true,
    };
    let mut r = rng::seeded(seed);
    for _ in 0..splines {
        let s = random_spline(&mut r);
        let k = s.knots();
        let mut xs: Vec<f64> = (0..points).map(|_| r.random_range(-1.2 * BOUND..1.2 * BOUND)).collect();
        xs.sort_by(f64::total_cmp);
        let mut prev = f64::NEG_INFINITY;
        for &x in &xs {
            let (y, logd) = k.forward(x).unwrap();
            if y.partial_cmp(&prev) != Some(std::cmp::Ordering::Greater) && x > xs[0] {
                w.monotone = false;
            }
            prev = y;
            let (back, inv_logd) = k.inverse(y).unwrap();
            w.roundtrip = w.roundtrip.max((back - x).abs());
            assert!((logd + inv_logd).abs() < 1e-8, "log-derivatives of f and f^-1 disagree");
            let h = 1e-6;
            let numeric = (k.forward(x + h).unwrap().0 - k.forward(x - h).unwrap().0) / (2.0 * h);
            let analytic = logd.exp();
            w.slope = w
                .slope
                .max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
        }
    }
    w
}

#[test]
fn thousand_random_splines() {
    let w = sweep(1000, 1000, 0x5e1);
    assert!(w.monotone);
    assert!(w.roundtrip < 1e-9, "roundtrip error {:e}", w.roundtrip);
    assert!(w.slope < 1e-4, "slope error {:e}", w.slope);
}

#[test]
fn identity_splines_have_zero_logdet() {
    let s = SplineParams::identity(BINS, BOUND).unwrap();
    let mut r = rng::seeded(1);
    for _ in 0..1000 {
        let x = r.random_range(-8.0..8.0);
        let (y, logd) = s.forward(x).unwrap();
        assert_eq!(logd, 0.0);
        assert!((y - x).abs() < 1e-12);
    }
    let bank = FlowBank::identity(4, 3, BINS, BOUND).unwrap();
    for u in 0..4 {
        let (z, ld) = bank.inverse(u, &[0.3, -4.9, 7.0]).unwrap();
        assert_eq!(ld, 0.0);
        assert!(z.iter().zip([0.3, -4.9, 7.0]).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn tails_are_identity() {
    let mut r = rng::seeded(2);
    for _ in 0..100 {
        let s = random_spline(&mut r);
        for x in [-9.0, -5.5, 5.5, 12.0] {
            let (y, logd) = s.forward(x).unwrap();
            assert_eq!((y, logd), (x, 0.0));
        }
    }
}

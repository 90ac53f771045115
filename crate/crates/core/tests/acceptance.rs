//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so every line is printed. A failing criterion is reported on its
//! line and in the summary; the process exits non-zero for it only when
//! `IMSDA_STRICT_ACCEPTANCE=1`, so the remaining test targets still run.

use std::process::ExitCode;
use std::time::Instant;

use imsda_core::flows::SplineParams;
use imsda_core::genproc::{check_variability, generate, sample_domain_specs, DomainSpec, GenConfig};
use imsda_core::imsda::{
    load_checkpoint, save_checkpoint, train, train_until, Batch, LogRecord, LossVars, ModelConfig, ModelState, TrainSet,
};
use imsda_core::metrics::{evaluate, hungarian, mcc};
use imsda_core::ndgrad::{grad_check_probed, Graph, Tensor, Var};
use imsda_core::study::{run_study, StudyConfig, StudyRow};
use imsda_core::{par, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

type Pick = fn(&LossVars) -> Var;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn normal(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

/// At most one decrease along `v`, and that one no larger than `slack`.
fn nearly_monotone(v: &[f64], slack: f64) -> bool {
    let drops: Vec<f64> = v.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    drops.len() <= 1 && drops.iter().all(|&d| d <= slack)
}

fn fmt_row(rows: &[StudyRow], f: fn(&StudyRow) -> f64) -> String {
    rows.iter()
        .map(|r| format!("d{}={:.3}", r.domains, f(r)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn table_trend(rows: &[StudyRow], seconds: f64) -> Outcome {
    let mccs: Vec<f64> = rows.iter().map(|r| r.mcc_mean).collect();
    let r2s: Vec<f64> = rows.iter().map(|r| r.r2_mean).collect();
    let last = rows.last().unwrap();
    let ok = nearly_monotone(&mccs, 0.03)
        && nearly_monotone(&r2s, 0.03)
        && last.mcc_mean >= 0.80
        && last.r2_mean >= 0.75
        && rows.iter().all(|r| r.failed == 0)
        && seconds <= 1800.0;
    outcome(
        ok,
        format!(
            "MCC [{}] R2 [{}] (need monotone up to one drop <= 0.03, d9 MCC >= 0.80, R2 >= 0.75), {seconds:.0} s",
            fmt_row(rows, |r| r.mcc_mean),
            fmt_row(rows, |r| r.r2_mean)
        ),
    )
}

fn avg_gap(rows: &[StudyRow]) -> Outcome {
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    let gap = last.avg_mean - first.avg_mean;
    outcome(
        gap >= 0.10,
        format!(
            "Avg d{}={:.3} d{}={:.3}, gap {gap:.3} (need >= 0.10)",
            first.domains, first.avg_mean, last.domains, last.avg_mean
        ),
    )
}

fn gradients() -> Outcome {
    let cfg = ModelConfig {
        n_obs: 4,
        domains: 3,
        hidden: 5,
        depth: 3,
        classifier_hidden: vec![4],
        n_classes: 3,
        labeled: true,
        target_domains: vec![2],
        ..Default::default()
    };
    let mut state = ModelState::new(cfg).unwrap();
    let mut r = rng::seeded(0xacc3);
    for p in state.flows.params_mut() {
        for v in p.data_mut() {
            *v = 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut r);
        }
    }
    let n = state.config.n_latent();
    let source = Batch {
        x: normal(6, 4, &mut r).map(|v| 2.0 * v),
        u: vec![0, 1, 0, 1, 1, 0],
        y: Some(vec![0, 2, 1, 1, 0, 2]),
    };
    let target = Batch {
        x: normal(4, 4, &mut r).map(|v| 2.0 * v),
        u: vec![2; 4],
        y: None,
    };
    let noise = vec![normal(6, n, &mut r), normal(4, n, &mut r)];
    let params: Vec<Tensor> = state.params().into_iter().cloned().collect();
    let terms: [(&str, Pick); 6] = [
        ("rec", |l| l.rec),
        ("kl_content", |l| l.kl_content),
        ("kl_style", |l| l.kl_style),
        ("cls", |l| l.cls.unwrap()),
        ("ent", |l| l.ent.unwrap()),
        ("total", |l| l.total),
    ];
    let mut probes = 0;
    let mut worst: f64 = 0.0;
    for (k, (_, pick)) in terms.iter().enumerate() {
        let f = |g: &mut Graph, vars: &[Var]| {
            let m = state.bind_leaves(g, vars)?;
            let lv = state.loss_graph(g, &m, &source, Some(&target), &noise)?;
            Ok(pick(&lv))
        };
        let probe = |pi: usize, len: usize| -> Vec<usize> {
            let mut r = rng::stream(0xacc3, &[k as u64, pi as u64]);
            (0..4.min(len)).map(|_| r.random_range(0..len)).collect()
        };
        let rep = grad_check_probed(f, &params, 1e-5, 1e-4, Some(&probe)).unwrap();
        probes += rep.probes;
        worst = worst.max(rep.max_rel_err);
    }
    outcome(
        probes >= 200 && worst < 1e-4,
        format!("{probes} probes over 6 loss terms, max rel. err {worst:.2e} (need < 1e-4)"),
    )
}

fn flow_suite() -> Outcome {
    let mut r = rng::seeded(0xacc4);
    let n = Normal::new(0.0, 1.5).unwrap();
    let (mut monotone, mut roundtrip, mut slope) = (true, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let mut draw = |k: usize| (0..k).map(|_| n.sample(&mut r)).collect::<Vec<f64>>();
        let s = SplineParams {
            bound: 5.0,
            widths: draw(8),
            heights: draw(8),
            derivatives: draw(7),
            lambdas: draw(8),
        };
        let k = s.knots();
        let mut xs: Vec<f64> = (0..1000).map(|_| r.random_range(-6.0..6.0)).collect();
        xs.sort_by(f64::total_cmp);
        let mut prev = f64::NEG_INFINITY;
        for (i, &x) in xs.iter().enumerate() {
            let (y, logd) = k.forward(x).unwrap();
            if i > 0 && xs[i - 1] < x && y.partial_cmp(&prev) != Some(std::cmp::Ordering::Greater) {
                monotone = false;
            }
            prev = y;
            roundtrip = roundtrip.max((k.inverse(y).unwrap().0 - x).abs());
            let h = 1e-6;
            let num = (k.forward(x + h).unwrap().0 - k.forward(x - h).unwrap().0) / (2.0 * h);
            let ana = logd.exp();
            slope = slope.max((ana - num).abs() / ana.max(num.abs()));
        }
    }
    let id = SplineParams::identity(8, 5.0).unwrap();
    let identity_zero = (0..1000).all(|i| id.forward(-6.0 + 0.012 * i as f64).unwrap().1 == 0.0);
    outcome(
        monotone && roundtrip < 1e-9 && slope < 1e-4 && identity_zero,
        format!(
            "10^3 splines x 10^3 points: monotone {monotone}, roundtrip {roundtrip:.1e}, slope rel. err {slope:.1e}, identity logdet 0 {identity_zero}"
        ),
    )
}

fn kl_estimator() -> Outcome {
    let draws = 10_000;
    let mut r = rng::seeded(0x6b1);
    let mut worst: f64 = 0.0;
    for trial in 0..20u64 {
        let mu: Vec<f64> = (0..2).map(|_| r.random_range(-4.0..4.0)).collect();
        let var: Vec<f64> = (0..2).map(|_| r.random_range(0.01..0.1)).collect();
        let cfg = ModelConfig {
            n_content: 1,
            n_style: 2,
            n_obs: 3,
            domains: 1,
            depth: 1,
            ..Default::default()
        };
        let mut s = ModelState::new(cfg).unwrap();
        let layer = &mut s.encoder.layers[0];
        layer.weight = Tensor::zeros(layer.weight.shape());
        let mut bias = vec![0.0];
        bias.extend(&mu);
        bias.push(0.0);
        bias.extend(var.iter().map(|v| v.ln()));
        layer.bias = Tensor::vector(bias);
        let batch = Batch {
            x: Tensor::zeros(&[draws, 3]),
            u: vec![0; draws],
            y: None,
        };
        let noise = s.noise(draws, &[0x6b1, trial]);
        let mc = s.vae_loss(&batch, &noise).unwrap().kl_style;
        let exact: f64 = mu.iter().zip(&var).map(|(m, v)| 0.5 * (m * m + v - 1.0 - v.ln())).sum();
        worst = worst.max((mc - exact).abs() / exact);
    }
    outcome(
        worst < 0.01,
        format!("20 (mu, sigma^2) draws, 10^4 samples each, max rel. err {worst:.2e} (need < 1e-2)"),
    )
}

fn mcc_oracle() -> Outcome {
    let mut r = rng::seeded(0xacc6);
    let mut all_equal = true;
    for n in 2..=6usize {
        let perms: Vec<Vec<usize>> = {
            fn rec(n: usize) -> Vec<Vec<usize>> {
                if n == 0 {
                    return vec![vec![]];
                }
                rec(n - 1)
                    .into_iter()
                    .flat_map(|p| {
                        (0..=p.len()).map(move |i| {
                            let mut q = p.clone();
                            q.insert(i, n - 1);
                            q
                        })
                    })
                    .collect()
            }
            rec(n)
        };
        for _ in 0..100 {
            let c: Vec<f64> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
            let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c[i * n + j].abs()).sum::<f64>();
            let a = hungarian(&c.iter().map(|v| -v.abs()).collect::<Vec<_>>(), n);
            let best = perms.iter().map(|p| score(p)).fold(f64::NEG_INFINITY, f64::max);
            all_equal &= (score(&a) - best).abs() < 1e-12;
        }
    }
    let mut worst: f64 = 0.0;
    for n in 2..=6 {
        let z = normal(1000, n, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let est = z.select_columns(&perm).map(|v| v.powi(3) + v);
        worst = worst.max((mcc(&z, &est).unwrap().score - 1.0).abs());
    }
    outcome(
        all_equal && worst < 1e-9,
        format!("assignment = brute force on 500 matrices: {all_equal}; monotone+permuted |MCC - 1| = {worst:.1e}"),
    )
}

fn variability_validator() -> Outcome {
    let same = vec![
        DomainSpec {
            id: 0,
            mean: vec![0.5, -1.0],
            variance: vec![0.4, 0.9],
        };
        5
    ];
    let r0 = check_variability(&same, &[0.0, 0.0]).unwrap();
    let passes = (0..100u64)
        .filter(|&t| {
            check_variability(&sample_domain_specs(5, 2, rng::derive(0xa3, &[t])), &[0.0, 0.0])
                .unwrap()
                .passed
        })
        .count();
    let hand: Vec<DomainSpec> = [(0.0, 1.0), (1.0, 1.0), (0.0, 0.5)]
        .iter()
        .enumerate()
        .map(|(id, &(m, v))| DomainSpec {
            id,
            mean: vec![m],
            variance: vec![v],
        })
        .collect();
    let rh = check_variability(&hand, &[0.0]).unwrap();
    let ok = r0.rank == 0 && !r0.passed && passes >= 99 && rh.rank == 2 && rh.passed;
    outcome(
        ok,
        format!(
            "identical domains rank {}, random specs pass {passes}/100, hand case rank {}",
            r0.rank, rh.rank
        ),
    )
}

fn log_bits(log: &[LogRecord]) -> Vec<u64> {
    log.iter()
        .flat_map(|r| [r.total, r.rec, r.kl, r.cls, r.ent].map(f64::to_bits))
        .collect()
}

fn determinism() -> Outcome {
    let gen = GenConfig {
        domains: 5,
        samples_per_domain: 200,
        ..Default::default()
    };
    let model = ModelConfig {
        domains: 5,
        epochs: 4,
        ..Default::default()
    };
    let ds = generate(&gen).unwrap();
    let test = generate(&gen.test_split(100)).unwrap();
    let set = TrainSet::from_dataset(&ds, &model).unwrap();
    let run = || {
        let mut s = ModelState::new(model.clone()).unwrap();
        let log = train(&mut s, &set).unwrap();
        let rep = evaluate(&s, &test, 0, false).unwrap();
        (s, log, rep)
    };
    let (a, la, ra) = run();
    let (b, lb, rb) = run();
    let repeat = a == b
        && log_bits(&la) == log_bits(&lb)
        && ra.mcc.to_bits() == rb.mcc.to_bits()
        && ra.r2.to_bits() == rb.r2.to_bits();

    let mut part = ModelState::new(model.clone()).unwrap();
    let mut log = train_until(&mut part, &set, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&part, &p).unwrap();
    let mut resumed = load_checkpoint(&p).unwrap();
    log.extend(train(&mut resumed, &set).unwrap());
    let resume = resumed == a && log_bits(&log) == log_bits(&la);
    outcome(
        repeat && resume,
        format!("repeat run bitwise equal {repeat}, checkpoint resume bitwise equal {resume}"),
    )
}

fn labeled_ablation() -> Outcome {
    let domains = 9;
    let target = domains - 1;
    let jobs: Vec<(u64, bool)> = (0..3u64).flat_map(|s| [(s, false), (s, true)]).collect();
    let acc = par::map_slice(&jobs, |&(seed, freeze)| {
        let gen = GenConfig {
            domains,
            labeled: true,
            domain_seed: rng::derive(0x1ab, &[seed, 0]),
            mixing_seed: rng::derive(0x1ab, &[seed, 1]),
            sampling_seed: rng::derive(0x1ab, &[seed, 2]),
            ..Default::default()
        };
        let ds = generate(&gen).unwrap();
        let test = generate(&gen.test_split(2000)).unwrap().subset(&[target]);
        let cfg = ModelConfig {
            domains,
            labeled: true,
            target_domains: vec![target],
            freeze_flows: freeze,
            seed,
            ..Default::default()
        };
        let mut s = ModelState::new(cfg.clone()).unwrap();
        train(&mut s, &TrainSet::from_dataset(&ds, &cfg).unwrap()).unwrap();
        let pred = s.predict(&test.x, &test.u).unwrap();
        let y = test.y.as_ref().unwrap();
        pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    });
    let full: Vec<f64> = acc.iter().step_by(2).copied().collect();
    let frozen: Vec<f64> = acc.iter().skip(1).step_by(2).copied().collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gain = 100.0 * (mean(&full) - mean(&frozen));
    outcome(
        gain >= 5.0,
        format!(
            "target accuracy full {:?} vs frozen flows {:?}, mean gain {gain:.1} points (need >= 5)",
            full.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            frozen.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("[{}] {n} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    let start = Instant::now();
    let study = run_study(&StudyConfig::default(), None).expect("study runs");
    let seconds = start.elapsed().as_secs_f64();
    report(1, "domain-count trend", table_trend(&study.rows, seconds));
    report(2, "Avg gap d=9 vs d=3", avg_gap(&study.rows));
    report(3, "gradient suite", gradients());
    report(4, "flow suite", flow_suite());
    report(5, "KL estimator", kl_estimator());
    report(6, "MCC oracle", mcc_oracle());
    report(7, "domain variability validator", variability_validator());
    report(8, "determinism and resume", determinism());
    report(9, "labeled flow ablation", labeled_ablation());

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("{} of {} criteria pass", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    println!("failing: {failed:?}");
    if std::env::var("IMSDA_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

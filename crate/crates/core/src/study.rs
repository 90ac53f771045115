//! Sweeps over domain counts and seeds: generate, train, evaluate, then
//! aggregate mean and standard deviation per domain count.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genproc::{generate, GenConfig};
use crate::imsda::{train, LogRecord, ModelConfig, ModelState, TrainSet};
use crate::metrics::{evaluate, scatter_export, MetricsReport};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub domain_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Total size of the held-out draw for each cell, split evenly over the
    /// domains.
    pub test_samples: usize,
    pub metric_seed: u64,
    pub generator: GenConfig,
    pub model: ModelConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            domain_counts: vec![3, 5, 7, 9],
            seeds: vec![0, 1, 2],
            test_samples: 10_000,
            metric_seed: 0,
            generator: GenConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domain_counts.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("domain_counts and seeds must be non-empty".into()));
        }
        if self.domain_counts.contains(&0) {
            return Err(Error::Config("domain_counts entries must be >= 1".into()));
        }
        if self.test_samples == 0 {
            return Err(Error::Config("test_samples must be >= 1".into()));
        }
        self.generator.validate()?;
        for &d in &self.domain_counts {
            self.cell_model(d, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    /// Generator of cell `(d, seed)`. Domain specs for a smaller `d` are a
    /// prefix of those for a larger one under the same seed.
    pub fn cell_generator(&self, domains: usize, seed: u64) -> GenConfig {
        let g = &self.generator;
        GenConfig {
            domains,
            domain_seed: rng::derive(g.domain_seed, &[seed]),
            mixing_seed: rng::derive(g.mixing_seed, &[seed]),
            sampling_seed: rng::derive(g.sampling_seed, &[seed, domains as u64]),
            ..g.clone()
        }
    }

    pub fn cell_model(&self, domains: usize, seed: u64) -> ModelConfig {
        let g = &self.generator;
        ModelConfig {
            n_content: g.n_content,
            n_style: g.n_style,
            n_obs: g.n_obs(),
            domains,
            seed: rng::derive(self.model.seed, &[seed]),
            ..self.model.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub domains: usize,
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    pub seconds: f64,
}

/// Aggregate row of the study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub domains: usize,
    pub runs: usize,
    pub failed: usize,
    pub mcc_mean: f64,
    pub mcc_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub avg_mean: f64,
    pub avg_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub config: StudyConfig,
    pub cells: Vec<CellResult>,
    pub rows: Vec<StudyRow>,
}

/// Everything one cell produces.
pub struct CellOutput {
    pub report: MetricsReport,
    pub log: Vec<LogRecord>,
    pub state: ModelState,
    pub z_true: crate::ndgrad::Tensor,
    pub z_est: crate::ndgrad::Tensor,
}

pub fn run_cell(cfg: &StudyConfig, domains: usize, seed: u64) -> Result<CellOutput> {
    let gen = cfg.cell_generator(domains, seed);
    let data = generate(&gen)?;
    let per_domain = cfg.test_samples.div_ceil(domains);
    let test = generate(&gen.test_split(per_domain))?;
    let model = cfg.cell_model(domains, seed);
    let set = TrainSet::from_dataset(&data, &model)?;
    let mut state = ModelState::new(model)?;
    let log = train(&mut state, &set).map_err(|a| a.error)?;
    let report = evaluate(&state, &test, cfg.metric_seed, false)?;
    let z_est = state.embed(&test.x)?;
    Ok(CellOutput {
        report,
        log,
        state,
        z_true: test.z,
        z_est,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn write_cell(dir: &Path, out: &CellOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    let mut log = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
    for r in &out.log {
        writeln!(log, "{}", serde_json::to_string(r)?)?;
    }
    log.flush()?;
    scatter_export(&out.z_true, &out.z_est, dir.join("scatter.csv"))?;
    crate::imsda::save_checkpoint(&out.state, dir.join("model.ckpt"))?;
    Ok(())
}

/// Runs every `(d, seed)` cell, in parallel when enabled. Failed cells are
/// recorded and skipped in the aggregate. With `out`, each cell writes its
/// report, log, scatter CSV and checkpoint to `out/d{d}_s{seed}/`.
pub fn run_study(cfg: &StudyConfig, out: Option<&Path>) -> Result<StudySummary> {
    cfg.validate()?;
    let cells: Vec<(usize, u64)> = cfg
        .domain_counts
        .iter()
        .flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s)))
        .collect();
    let results = par::map_slice(&cells, |&(d, s)| {
        let start = Instant::now();
        let outcome = run_cell(cfg, d, s).and_then(|o| {
            if let Some(root) = out {
                write_cell(&root.join(format!("d{d}_s{s}")), &o)?;
            }
            Ok(o.report)
        });
        let seconds = start.elapsed().as_secs_f64();
        match outcome {
            Ok(r) => CellResult {
                domains: d,
                seed: s,
                report: Some(r),
                error: None,
                seconds,
            },
            Err(e) => CellResult {
                domains: d,
                seed: s,
                report: None,
                error: Some(e.to_string()),
                seconds,
            },
        }
    });
    let rows = cfg
        .domain_counts
        .iter()
        .map(|&d| {
            let mine: Vec<&CellResult> = results.iter().filter(|c| c.domains == d).collect();
            let ok: Vec<&MetricsReport> = mine.iter().filter_map(|c| c.report.as_ref()).collect();
            let pick = |f: fn(&MetricsReport) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mcc_mean, mcc_std) = pick(|r| r.mcc);
            let (r2_mean, r2_std) = pick(|r| r.r2);
            let (avg_mean, avg_std) = pick(|r| r.avg);
            StudyRow {
                domains: d,
                runs: ok.len(),
                failed: mine.len() - ok.len(),
                mcc_mean,
                mcc_std,
                r2_mean,
                r2_std,
                avg_mean,
                avg_std,
            }
        })
        .collect();
    let summary = StudySummary {
        config: cfg.clone(),
        cells: results,
        rows,
    };
    if let Some(root) = out {
        fs::create_dir_all(root)?;
        fs::write(root.join("table.csv"), table_csv(&summary))?;
        fs::write(root.join("table.txt"), table_text(&summary))?;
        fs::write(root.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

/// One line per domain count with mean and std of each score.
pub fn table_csv(s: &StudySummary) -> String {
    let mut out = String::from("d,runs,failed,mcc_mean,mcc_std,r2_mean,r2_std,avg_mean,avg_std\n");
    for r in &s.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.domains, r.runs, r.failed, r.mcc_mean, r.mcc_std, r.r2_mean, r.r2_std, r.avg_mean, r.avg_std
        );
    }
    out
}

/// Scores as rows and domain counts as columns, `mean ± std`.
pub fn table_text(s: &StudySummary) -> String {
    let cell = |m: f64, sd: f64| {
        if m.is_nan() {
            "n/a".to_string()
        } else {
            format!("{m:.2} ± {sd:.2}")
        }
    };
    let mut header = vec![String::new()];
    header.extend(s.rows.iter().map(|r| format!("d={}", r.domains)));
    let mut lines = vec![header];
    for (name, f) in [
        (
            "MCC",
            (|r: &StudyRow| (r.mcc_mean, r.mcc_std)) as fn(&StudyRow) -> (f64, f64),
        ),
        ("R2", |r| (r.r2_mean, r.r2_std)),
        ("Avg.", |r| (r.avg_mean, r.avg_std)),
    ] {
        let mut line = vec![name.to_string()];
        line.extend(s.rows.iter().map(|r| {
            let (m, sd) = f(r);
            cell(m, sd)
        }));
        lines.push(line);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let padded: Vec<String> = l
            .iter()
            .zip(&widths)
            .map(|(v, &w)| format!("{v}{}", " ".repeat(w - v.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    }
    let failed: Vec<String> = s
        .cells
        .iter()
        .filter_map(|c| {
            c.error
                .as_ref()
                .map(|e| format!("d={} seed={}: {e}", c.domains, c.seed))
        })
        .collect();
    if !failed.is_empty() {
        let _ = writeln!(out, "\nfailed cells:");
        for f in failed {
            let _ = writeln!(out, "  {f}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_of_small_samples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn nested_domain_specs() {
        let cfg = StudyConfig::default();
        let a = crate::genproc::sample_domain_specs(3, 2, cfg.cell_generator(3, 1).domain_seed);
        let b = crate::genproc::sample_domain_specs(9, 2, cfg.cell_generator(9, 1).domain_seed);
        assert_eq!(a[..], b[..3]);
    }

    #[test]
    fn failed_cells_are_listed() {
        let summary = StudySummary {
            config: StudyConfig::default(),
            cells: vec![CellResult {
                domains: 3,
                seed: 1,
                report: None,
                error: Some("numerical failure: boom".into()),
                seconds: 0.0,
            }],
            rows: vec![StudyRow {
                domains: 3,
                runs: 0,
                failed: 1,
                mcc_mean: f64::NAN,
                mcc_std: f64::NAN,
                r2_mean: f64::NAN,
                r2_std: f64::NAN,
                avg_mean: f64::NAN,
                avg_std: f64::NAN,
            }],
        };
        let t = table_text(&summary);
        assert!(t.contains("n/a"));
        assert!(t.contains("d=3 seed=1: numerical failure: boom"));
        assert!(table_csv(&summary).starts_with("d,runs,failed,"));
    }
}

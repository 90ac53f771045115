//! `imsda`: generate synthetic multi-domain data, train the model, score
//! identifiability, and run the domain-count study.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use imsda_core::genproc::{check_variability, generate, load_dataset, save_dataset, write_csv, Dataset, GenConfig};
use imsda_core::imsda::{load_checkpoint, save_checkpoint, train_until, LogRecord, ModelConfig, ModelState, TrainSet};
use imsda_core::metrics::{evaluate, scatter_export};
use imsda_core::study::{run_study, table_text, StudyConfig};
use imsda_core::{par, rng, Error};

const THREADS_ENV: &str = "IMSDA_THREADS";

#[derive(Parser)]
#[command(
    name = "imsda",
    version,
    about = "Partially identifiable multi-domain latent-variable model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset and print its summary.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint against a dataset's ground truth.
    Eval(EvalArgs),
    /// Generate, train and evaluate over domain counts and seeds.
    Study(StudyArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator TOML; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file to write. The summary goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// Derives the domain, mixing and sampling seeds from one value.
    #[arg(long)]
    seed: Option<u64>,
    /// Attach class labels.
    #[arg(long)]
    labeled: bool,
    /// Also write the dataset as CSV.
    #[arg(long)]
    csv: bool,
    /// Write the held-out draw of this configuration instead: same domains
    /// and mixing, fresh samples, this many per domain.
    #[arg(long, value_name = "PER_DOMAIN")]
    test_split: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Model TOML; extents default to the dataset's.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Model seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint; its configuration replaces `--config`.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset with ground-truth latents, usually a held-out draw.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML with `metric_seed` and `search`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metric seed (train/test split of the R² regression).
    #[arg(long)]
    seed: Option<u64>,
    /// Pick the style block by exhaustive partition search.
    #[arg(long)]
    search: bool,
}

#[derive(Args)]
struct StudyArgs {
    /// Study TOML with optional `[generator]` and `[model]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, one subdirectory per cell.
    #[arg(long)]
    out: PathBuf,
    /// Shifts the seed list to start at this value.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    metric_seed: u64,
    search: bool,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn inner(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Numerical(e) => e,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Config(e.into()),
            Error::Numerical(_) | Error::NonFinite { .. } => Failure::Numerical(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn core<T>(r: imsda_core::Result<T>, what: &str) -> Outcome<T> {
    r.map_err(|e| match Failure::from(e) {
        Failure::Config(e) => Failure::Config(e.context(what.to_string())),
        Failure::Data(e) => Failure::Data(e.context(what.to_string())),
        Failure::Numerical(e) => Failure::Numerical(e.context(what.to_string())),
    })
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(Failure::Config)?;
    toml::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::Config)
}

fn to_toml<T: Serialize>(v: &T) -> Outcome<String> {
    toml::to_string_pretty(v)
        .context("serializing configuration")
        .map_err(Failure::Config)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data_err)
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(data_err)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_summary(ds: &Dataset) -> Outcome<String> {
    let cfg = &ds.config;
    let mut s = String::new();
    s.push_str("# resolved configuration\n");
    s.push_str(&to_toml(cfg)?);
    s.push_str(&format!(
        "\n# dataset\nsamples = {}\nn_content = {}\nn_style = {}\nn_obs = {}\nlabeled = {}\n",
        ds.len(),
        cfg.n_content,
        cfg.n_style,
        ds.x.cols(),
        ds.y.is_some()
    ));
    s.push_str("\n# domains: id, samples, style mean, style variance\n");
    for spec in &ds.specs {
        let count = ds.u.iter().filter(|&&u| u == spec.id).count();
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:+.4}")).collect::<Vec<_>>().join(" ");
        s.push_str(&format!(
            "{:>3}  {:>6}  [{}]  [{}]\n",
            spec.id,
            count,
            fmt(&spec.mean),
            fmt(&spec.variance)
        ));
    }
    if let Some(y) = &ds.y {
        let mut counts = vec![0usize; cfg.n_classes];
        for &c in y {
            counts[c] += 1;
        }
        s.push_str(&format!("\n# class counts\n{counts:?}\n"));
    }
    s.push_str("\n# domain variability (linear independence) check at z_s = 0\n");
    if ds.specs.len() < 2 * cfg.n_style + 1 {
        s.push_str(&format!(
            "skipped: needs at least {} domains, have {}\n",
            2 * cfg.n_style + 1,
            ds.specs.len()
        ));
    } else {
        let r = core(
            check_variability(&ds.specs, &vec![0.0; cfg.n_style]),
            "domain variability check",
        )?;
        s.push_str(&format!(
            "rank = {} (required {})\npassed = {}\nsingular_values = {:?}\n",
            r.rank, r.required, r.passed, r.singular_values
        ));
    }
    Ok(s)
}

fn cmd_gen(a: &GenArgs) -> Outcome {
    let mut cfg: GenConfig = read_toml(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.domain_seed = rng::derive(s, &[0]);
        cfg.mixing_seed = rng::derive(s, &[1]);
        cfg.sampling_seed = rng::derive(s, &[2]);
    }
    if a.labeled {
        cfg.labeled = true;
    }
    if let Some(n) = a.test_split {
        cfg = cfg.test_split(n);
    }
    core(cfg.validate(), "generator config")?;
    let ds = core(generate(&cfg), "generating data")?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    core(save_dataset(&ds, &a.out), "writing dataset")?;
    if a.csv {
        core(write_csv(&ds, a.out.with_extension("csv")), "writing CSV")?;
    }
    let summary = gen_summary(&ds)?;
    write_file(&sidecar(&a.out, ".summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Fills extents from the dataset. A value set explicitly in the file that
/// disagrees with the data is a data error.
fn model_config_for(path: Option<&Path>, ds: &Dataset) -> Outcome<ModelConfig> {
    let explicit: toml::Table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(Failure::Config)?;
            text.parse()
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(Failure::Config)?
        }
        None => toml::Table::new(),
    };
    let mut cfg: ModelConfig = read_toml(path)?;
    let g = &ds.config;
    for (key, have, want) in [
        ("n_content", cfg.n_content, g.n_content),
        ("n_style", cfg.n_style, g.n_style),
        ("n_obs", cfg.n_obs, ds.x.cols()),
        ("domains", cfg.domains, g.domains),
    ] {
        if explicit.contains_key(key) && have != want {
            return Err(data_err(anyhow::anyhow!(
                "config sets {key} = {have} but the dataset has {want}"
            )));
        }
    }
    cfg.n_content = g.n_content;
    cfg.n_style = g.n_style;
    cfg.n_obs = ds.x.cols();
    cfg.domains = g.domains;
    if cfg.labeled {
        if ds.y.is_none() {
            return Err(data_err(anyhow::anyhow!("labeled training needs a labeled dataset")));
        }
        if !explicit.contains_key("n_classes") {
            cfg.n_classes = g.n_classes;
        }
    }
    Ok(cfg)
}

fn write_log(path: &Path, log: &[LogRecord], append: bool) -> Outcome {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(data_err)?;
    for r in log {
        let line = serde_json::to_string(r).map_err(data_err)?;
        writeln!(f, "{line}").map_err(data_err)?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let ds = core(load_dataset(&a.data), "loading dataset")?;
    let (mut state, resumed) = match &a.resume {
        Some(p) => (core(load_checkpoint(p), "loading checkpoint")?, true),
        None => {
            let mut cfg = model_config_for(a.config.as_deref(), &ds)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            core(cfg.validate(), "model config")?;
            (core(ModelState::new(cfg), "building model")?, false)
        }
    };
    if resumed {
        if let Some(e) = a.epochs {
            state.config.epochs = e;
        }
    }
    let set = core(TrainSet::from_dataset(&ds, &state.config), "preparing training data")?;
    create_dir(&a.out)?;
    write_file(&a.out.join("config.toml"), to_toml(&state.config)?)?;
    let end = state.config.epochs as u64;
    let log_path = a.out.join("train_log.jsonl");
    let ckpt = a.out.join("model.ckpt");
    match train_until(&mut state, &set, end) {
        Ok(log) => {
            write_log(&log_path, &log, resumed)?;
            core(save_checkpoint(&state, &ckpt), "writing checkpoint")?;
            if let Some(last) = log.last() {
                println!(
                    "epoch {}: L_total {:.6} L_rec {:.6} L_KL {:.6}",
                    last.epoch, last.total, last.rec, last.kl
                );
            }
            println!("checkpoint: {}", ckpt.display());
            Ok(())
        }
        Err(abort) => {
            write_log(&log_path, &abort.log, resumed)?;
            core(save_checkpoint(&state, &ckpt), "writing last-good checkpoint")?;
            eprintln!(
                "last good checkpoint (epoch {}, step {}): {}",
                state.epoch,
                state.step,
                ckpt.display()
            );
            Err(Failure::Numerical(anyhow::Error::new(abort)))
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    let mut cfg: EvalConfig = read_toml(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.metric_seed = s;
    }
    if a.search {
        cfg.search = true;
    }
    let state = core(load_checkpoint(&a.checkpoint), "loading checkpoint")?;
    let ds = core(load_dataset(&a.data), "loading dataset")?;
    let report = core(evaluate(&state, &ds, cfg.metric_seed, cfg.search), "evaluating")?;
    create_dir(&a.out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        eval: &'a EvalConfig,
        model: &'a ModelConfig,
    }
    write_file(
        &a.out.join("config.toml"),
        to_toml(&Resolved {
            eval: &cfg,
            model: &state.config,
        })?,
    )?;
    write_file(
        &a.out.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(data_err)?,
    )?;
    let z_est = core(state.embed(&ds.x), "embedding")?;
    core(
        scatter_export(&ds.z, &z_est, a.out.join("scatter.csv")),
        "writing scatter CSV",
    )?;
    println!("MCC  {:.4}", report.mcc);
    println!("R2   {:.4}", report.r2);
    println!("Avg. {:.4}", report.avg);
    Ok(())
}

fn cmd_study(a: &StudyArgs) -> Outcome {
    let mut cfg: StudyConfig = read_toml(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seeds = (0..cfg.seeds.len() as u64).map(|i| s + i).collect();
    }
    core(cfg.validate(), "study config")?;
    create_dir(&a.out)?;
    write_file(&a.out.join("config.toml"), to_toml(&cfg)?)?;
    let summary = core(run_study(&cfg, Some(&a.out)), "running study")?;
    print!("{}", table_text(&summary));
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Study(a) => cmd_study(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                par::init_threads(n);
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.inner());
            ExitCode::from(f.code())
        }
    }
}

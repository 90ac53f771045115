use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Batch, LossParts, ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::genproc::Dataset;
use crate::ndgrad::{Graph, Tensor};
use crate::rng;

const SHUFFLE_SOURCE: u64 = 0x5f;
const SHUFFLE_TARGET: u64 = 0x7f;
const STEP_NOISE: u64 = 0x40;
const EVAL_NOISE: u64 = 0xe0;

/// Training data split into labeled source rows and unlabeled target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub source: Batch,
    pub target: Option<Batch>,
}

impl TrainSet {
    /// Unlabeled mode uses every row as source. Labeled mode keeps the labels
    /// of non-target domains and strips them from the target domains.
    pub fn from_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<Self> {
        if ds.x.cols() != cfg.n_obs || ds.config.domains != cfg.domains {
            return Err(Error::Extent(format!(
                "dataset has n_obs {} and {} domains, model expects n_obs {} and {} domains",
                ds.x.cols(),
                ds.config.domains,
                cfg.n_obs,
                cfg.domains
            )));
        }
        if !cfg.labeled {
            return Ok(Self {
                source: Batch {
                    x: ds.x.clone(),
                    u: ds.u.clone(),
                    y: None,
                },
                target: None,
            });
        }
        let y =
            ds.y.as_ref()
                .ok_or_else(|| Error::Config("labeled mode needs a labeled dataset".into()))?;
        let (tgt, src): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&r| cfg.target_domains.contains(&ds.u[r]));
        let pick = |rows: &[usize], labels: bool| Batch {
            x: ds.x.select_rows(rows),
            u: rows.iter().map(|&r| ds.u[r]).collect(),
            y: labels.then(|| rows.iter().map(|&r| y[r]).collect()),
        };
        if src.is_empty() {
            return Err(Error::Config("no source rows".into()));
        }
        Ok(Self {
            source: pick(&src, true),
            target: (!tgt.is_empty()).then(|| pick(&tgt, false)),
        })
    }
}

/// One line of the training log. Epoch 0 is the loss of the initial state
/// on the full training set; later epochs average the minibatch losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: u64,
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "L_rec")]
    pub rec: f64,
    #[serde(rename = "L_KL")]
    pub kl: f64,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_ent")]
    pub ent: f64,
}

impl LogRecord {
    fn from_parts(epoch: u64, p: &LossParts) -> Self {
        Self {
            epoch,
            total: p.total,
            rec: p.rec,
            kl: p.kl,
            cls: p.cls,
            ent: p.ent,
        }
    }
}

/// A non-finite loss or gradient stopped training. The state passed to
/// [`train_until`] still holds the parameters from before the failing step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub epoch: u64,
    pub step: u64,
    pub log: Vec<LogRecord>,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted in epoch {} at step {}: {}",
            self.epoch, self.step, self.error
        )
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn rows_of(b: &Batch, idx: &[usize]) -> Batch {
    Batch {
        x: b.x.select_rows(idx),
        u: idx.iter().map(|&r| b.u[r]).collect(),
        y: b.y.as_ref().map(|y| idx.iter().map(|&r| y[r]).collect()),
    }
}

fn permutation(len: usize, seed: u64, tag: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, &[tag, epoch]));
    idx
}

/// Trains for the configured number of epochs.
pub fn train(state: &mut ModelState, data: &TrainSet) -> Result<Vec<LogRecord>, TrainAbort> {
    let end = state.config.epochs as u64;
    train_until(state, data, end)
}

/// Continues training from `state.epoch` up to `end_epoch`. Shuffles and
/// noise depend only on the seed, the epoch and the step within the epoch,
/// so a run split across several calls (with a checkpoint in between)
/// matches an uninterrupted one bit for bit.
pub fn train_until(state: &mut ModelState, data: &TrainSet, end_epoch: u64) -> Result<Vec<LogRecord>, TrainAbort> {
    let mut log = Vec::new();
    let abort = |state: &ModelState, error: Error, log: Vec<LogRecord>| TrainAbort {
        error,
        epoch: state.epoch + 1,
        step: state.step,
        log,
    };

    if state.epoch == 0 {
        let tgt_noise = data.target.as_ref().map(|t| state.noise(t.rows(), &[EVAL_NOISE, 1]));
        let mut noise = vec![state.noise(data.source.rows(), &[EVAL_NOISE, 0])];
        noise.extend(tgt_noise);
        match state.total_loss(&data.source, data.target.as_ref(), &noise) {
            Ok(p) => log.push(LogRecord::from_parts(0, &p)),
            Err(e) => return Err(abort(state, e, log)),
        }
    }

    let seed = state.config.seed;
    let bs = state.config.batch_size;
    let trainable = state.trainable();
    let names = state.param_names();
    let names: Vec<String> = trainable.iter().map(|&i| names[i].clone()).collect();

    while state.epoch < end_epoch {
        let epoch = state.epoch + 1;
        let src_perm = permutation(data.source.rows(), seed, SHUFFLE_SOURCE, epoch);
        let tgt_perm = data
            .target
            .as_ref()
            .map(|t| permutation(t.rows(), seed, SHUFFLE_TARGET, epoch));
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        for (k, chunk) in src_perm.chunks(bs).enumerate() {
            let source = rows_of(&data.source, chunk);
            let target = match (&data.target, &tgt_perm) {
                (Some(t), Some(p)) => {
                    let idx: Vec<usize> = (0..bs).map(|j| p[(k * bs + j) % p.len()]).collect();
                    Some(rows_of(t, &idx))
                }
                _ => None,
            };
            let mut noise = vec![state.noise(source.rows(), &[STEP_NOISE, epoch, k as u64, 0])];
            if let Some(t) = &target {
                noise.push(state.noise(t.rows(), &[STEP_NOISE, epoch, k as u64, 1]));
            }
            let parts = match step(state, &source, target.as_ref(), &noise, &trainable, &names) {
                Ok(p) => p,
                Err(e) => return Err(abort(state, e, log)),
            };
            let w = source.rows() as f64;
            sums.total += w * parts.total;
            sums.rec += w * parts.rec;
            sums.kl += w * parts.kl;
            sums.cls += w * parts.cls;
            sums.ent += w * parts.ent;
            seen += source.rows();
        }
        let inv = 1.0 / seen.max(1) as f64;
        state.epoch = epoch;
        log.push(LogRecord {
            epoch,
            total: sums.total * inv,
            rec: sums.rec * inv,
            kl: sums.kl * inv,
            cls: sums.cls * inv,
            ent: sums.ent * inv,
        });
    }
    Ok(log)
}

/// One optimizer step. Leaves `state` untouched on error.
fn step(
    state: &mut ModelState,
    source: &Batch,
    target: Option<&Batch>,
    noise: &[Tensor],
    trainable: &[usize],
    names: &[String],
) -> Result<LossParts> {
    let mut g = Graph::new();
    let leaves = {
        let params = state.params();
        params
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable.binary_search(&i).is_ok() {
                    g.param((*t).clone())
                } else {
                    g.constant((*t).clone())
                }
            })
            .collect::<Vec<_>>()
    };
    let m = state.bind_leaves(&mut g, &leaves)?;
    let vars = state.loss_graph(&mut g, &m, source, target, noise)?;
    let parts = vars.values(&g);
    if !parts.is_finite() {
        return Err(Error::non_finite(format!(
            "loss at step {} ({})",
            state.step + 1,
            parts.describe()
        )));
    }
    g.backward(vars.total)?;
    let grads: Vec<Tensor> = trainable
        .iter()
        .map(|&i| {
            g.grad(leaves[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(leaves[i])))
        })
        .collect();
    let ModelState {
        encoder,
        decoder,
        flows,
        classifier,
        optimizer,
        ..
    } = &mut *state;
    let mut all: Vec<&mut Tensor> = encoder.params_mut().chain(decoder.params_mut()).collect();
    all.extend(flows.params_mut());
    all.extend(classifier.params_mut());
    let mut selected: Vec<&mut Tensor> = all
        .into_iter()
        .enumerate()
        .filter(|(i, _)| trainable.binary_search(i).is_ok())
        .map(|(_, p)| p)
        .collect();
    optimizer.step(&mut selected, &grads, names)?;
    state.step += 1;
    Ok(parts)
}

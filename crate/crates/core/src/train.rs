//! SGD training on the synthetic task.
//!
//! The run is a pure function of (model config, task, train config, seed):
//! parameters come from the seed, the epoch order from `(seed, epoch)`, and the
//! learning rate from the step counter. [`TrainState`] holds exactly that, so a
//! run resumed from a saved state continues bit-identically.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ClipBatch, Model, ModelConfig, Params};
use crate::synthetic::{derive_seed, Split, SyntheticTask};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Peak learning rate reached after warmup.
    pub lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    /// Applied to matrices only; biases, norms and embeddings are not decayed.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 16,
            train_size: 512,
            val_size: 256,
            lr: 0.03,
            warmup_epochs: 1,
            momentum: 0.9,
            weight_decay: 4e-4,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "train.clip_norm must be non-negative, got {}",
                self.clip_norm
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train_size.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.epochs as u64
    }

    /// Linear warmup to `lr`, then cosine decay to zero at the last step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = self.steps_per_epoch() * self.warmup_epochs as u64;
        let total = self.total_steps();
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = total.saturating_sub(warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + num_traits::Float::cos(PI * progress))
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Params,
    pub momentum: Vec<Tensor>,
    /// Optimizer steps taken; drives the learning-rate schedule.
    pub step: u64,
    /// Completed epochs; with `seed`, fixes the next data order.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn fresh(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::new(*cfg, derive_seed(seed, &[0x1417]))?;
        let momentum = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            params: model.params,
            momentum,
            step: 0,
            epoch: 0,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<MetricRow>,
}

impl TrainOutcome {
    /// Validation top-1 of the last logged epoch.
    pub fn final_top1(&self) -> Option<f64> {
        self.log.iter().rev().find(|r| r.split == Split::Val).map(|r| r.top1)
    }
}

#[derive(Debug)]
pub enum TrainError {
    /// Loss or an intermediate went non-finite. `last_good` is the state
    /// before the failing step; `log` holds the rows logged so far.
    Diverged {
        step: u64,
        cause: Error,
        last_good: Box<TrainState>,
        log: Vec<MetricRow>,
    },
    Failed(Error),
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Failed(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Diverged { step, cause, .. } => write!(f, "training diverged at step {step}: {cause}"),
            TrainError::Failed(e) => e.fmt(f),
        }
    }
}

/// Trains a fresh model for `tc.epochs` epochs.
pub fn train(
    cfg: &ModelConfig,
    task: &SyntheticTask,
    tc: &TrainConfig,
    seed: u64,
) -> core::result::Result<TrainOutcome, TrainError> {
    run(cfg, task, tc, TrainState::fresh(cfg, seed)?, tc.epochs)
}

/// Continues from `state` until `until_epoch` epochs are complete. The
/// schedule always spans `tc.epochs`, so stopping early and resuming matches
/// an uninterrupted run.
pub fn run(
    cfg: &ModelConfig,
    task: &SyntheticTask,
    tc: &TrainConfig,
    mut state: TrainState,
    until_epoch: usize,
) -> core::result::Result<TrainOutcome, TrainError> {
    tc.validate()?;
    task.validate()?;
    check_task(cfg, task)?;
    let mut model = Model::new(*cfg, 0)?;
    model
        .params
        .replace_all(state.params.iter().map(|(n, t)| (n.into(), t.clone())).collect())?;
    let decay: Vec<bool> = model.params.tensors().iter().map(|t| t.rank() >= 2).collect();
    let clips: Vec<(Vec<f64>, usize)> = (0..tc.train_size as u64).map(|i| task.clip(Split::Train, i)).collect();
    let mut log = Vec::new();
    let until = until_epoch.min(tc.epochs);
    while state.epoch < until {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            state.seed,
            &[0xe90c, state.epoch as u64],
        )));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let batch = assemble(task, &clips, chunk)?;
            let step = state.step;
            let diverged = |cause: Error, state: &TrainState, log: &Vec<MetricRow>| TrainError::Diverged {
                step,
                cause,
                last_good: Box::new(state.clone()),
                log: log.clone(),
            };
            let (loss, grads, logits) = match model.loss_and_grads(&batch) {
                Ok(r) => r,
                Err(e @ Error::NonFinite { .. }) => return Err(diverged(e, &state, &log)),
                Err(e) => return Err(e.into()),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                let cause = Error::Domain {
                    op: "train",
                    reason: format!("loss {loss} or its gradient is not finite"),
                };
                return Err(diverged(cause, &state, &log));
            }
            let lr = tc.lr_at(step);
            let scale = clip_scale(&grads, tc.clip_norm);
            let params = model.params.tensors_mut();
            for (i, g) in grads.iter().enumerate() {
                let wd = if decay[i] { tc.weight_decay } else { 0.0 };
                let p = params[i].data_mut();
                let m = state.momentum[i].data_mut();
                for ((p, m), g) in p.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                    *m = tc.momentum * *m + scale * g + wd * *p;
                    *p -= lr * *m;
                }
            }
            state.params.tensors_mut().clone_from_slice(model.params.tensors());
            state.step += 1;
            loss_sum += loss * batch.len() as f64;
            correct += count_correct(&logits, &batch.labels);
            seen += batch.len();
        }
        state.epoch += 1;
        log.push(MetricRow {
            step: state.step,
            epoch: state.epoch,
            split: Split::Train,
            loss: loss_sum / seen as f64,
            top1: correct as f64 / seen as f64,
        });
        let (loss, top1) = evaluate(&model, task, Split::Val, tc.val_size, tc.batch_size)?;
        log.push(MetricRow {
            step: state.step,
            epoch: state.epoch,
            split: Split::Val,
            loss,
            top1,
        });
    }
    Ok(TrainOutcome { model, state, log })
}

/// Factor that brings the global gradient norm down to `max_norm`.
fn clip_scale(grads: &[Tensor], max_norm: f64) -> f64 {
    if max_norm == 0.0 {
        return 1.0;
    }
    let sq: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
    let norm = num_traits::Float::sqrt(sq);
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

fn check_task(cfg: &ModelConfig, task: &SyntheticTask) -> Result<()> {
    let m = (cfg.frames, cfg.height, cfg.width, cfg.channels, cfg.classes);
    let t = (task.frames, task.height, task.width, task.channels, task.classes);
    if m != t {
        return Err(Error::Config(format!(
            "model expects (frames, height, width, channels, classes) = {m:?}, task produces {t:?}"
        )));
    }
    Ok(())
}

fn assemble(task: &SyntheticTask, clips: &[(Vec<f64>, usize)], idx: &[usize]) -> Result<ClipBatch> {
    let mut data = Vec::with_capacity(idx.len() * clips[0].0.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&clips[i].0);
        labels.push(clips[i].1);
    }
    let shape = [idx.len(), task.frames, task.height, task.width, task.channels];
    ClipBatch::new(Tensor::new(&shape, data)?, labels, task.classes)
}

/// Number of rows of `logits` whose arg-max equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == l
        })
        .count()
}

/// Mean loss and top-1 of `model` on one batch.
pub fn evaluate_batch(model: &Model, batch: &ClipBatch) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let pv = model.leaves(&mut tape, false);
    let logits = model.forward(&mut tape, &pv, &batch.pixels, None)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let correct = count_correct(tape.value(logits), &batch.labels);
    Ok((tape.value(loss).item(), correct as f64 / batch.len() as f64))
}

/// Mean loss and top-1 over the first `count` clips of `split`.
pub fn evaluate(
    model: &Model,
    task: &SyntheticTask,
    split: Split,
    count: usize,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let indices: Vec<u64> = (0..count as u64).collect();
    let (mut loss, mut top1) = (0.0, 0.0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (l, t) = evaluate_batch(model, &task.batch(split, chunk)?)?;
        loss += l * chunk.len() as f64;
        top1 += t * chunk.len() as f64;
    }
    Ok((loss / count as f64, top1 / count as f64))
}

/// Plain momentum SGD on one fixed batch; returns the loss before each step,
/// stopping once it falls below `target`.
pub fn overfit(model: &mut Model, batch: &ClipBatch, steps: usize, lr: f64, target: f64) -> Result<Vec<f64>> {
    let mut momentum: Vec<Tensor> = model
        .params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut losses = Vec::new();
    for _ in 0..steps {
        let (loss, grads, _) = model.loss_and_grads(batch)?;
        losses.push(loss);
        if loss < target {
            break;
        }
        for ((p, m), g) in model.params.tensors_mut().iter_mut().zip(&mut momentum).zip(&grads) {
            for ((p, m), g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
                *m = 0.9 * *m + g;
                *p -= lr * *m;
            }
        }
    }
    Ok(losses)
}

//! AdamW over θ with linear warmup, per-epoch validation, best-checkpoint
//! tracking and bit-exact resume.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::optim::{AdamHyper, AdamW};
use crate::seed;
use crate::tensor::Matrix;

use super::model::{EncodedExample, Model, Theta};

pub const STATE_FORMAT: &str = "intervalrec_train_state_v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stop once validation HR@1 reaches this value.
    pub stop_at_val_hr: Option<f64>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 1e-4,
            warmup_frac: 0.03,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            stop_at_val_hr: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("invalid learning-rate schedule: lr {} warmup {}", self.lr, self.warmup_frac)));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn warmup_steps(&self, n: usize) -> usize {
        ((self.epochs * self.steps_per_epoch(n)) as f64 * self.warmup_frac).ceil() as usize
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize, n: usize) -> f64 {
        let w = self.warmup_steps(n);
        if w == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / w as f64).min(1.0)
        }
    }
}

/// One line of the training log. `val_hr1` is set on the last step of an
/// epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_hr1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub theta: Theta,
    pub optimizer: AdamW,
    pub best: Theta,
    pub best_val_hr1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub stopped: bool,
    pub log: Vec<LogRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    epoch: usize,
    adam_t: u64,
    best_val_hr1: Option<f64>,
    best_epoch: Option<usize>,
    stale_epochs: usize,
    stopped: bool,
    log: Vec<LogRecord>,
}

impl TrainState {
    pub fn new(theta: Theta) -> Self {
        Self {
            step: 0,
            epoch: 0,
            optimizer: AdamW::new(theta.named().into_iter().map(|(_, m)| m)),
            best: theta.clone(),
            theta,
            best_val_hr1: None,
            best_epoch: None,
            stale_epochs: 0,
            stopped: false,
            log: Vec::new(),
        }
    }

    pub fn to_tensors(&self) -> Result<NamedTensors> {
        let mut t = NamedTensors::new(STATE_FORMAT);
        for (k, (name, m)) in self.theta.named().into_iter().enumerate() {
            t.insert(format!("theta/{name}"), m.clone());
            t.insert(format!("adam_m/{name}"), self.optimizer.m[k].clone());
            t.insert(format!("adam_v/{name}"), self.optimizer.v[k].clone());
        }
        for (name, m) in self.best.named() {
            t.insert(format!("best/{name}"), m.clone());
        }
        t.metadata = serde_json::to_value(StateMeta {
            step: self.step,
            epoch: self.epoch,
            adam_t: self.optimizer.t,
            best_val_hr1: self.best_val_hr1,
            best_epoch: self.best_epoch,
            stale_epochs: self.stale_epochs,
            stopped: self.stopped,
            log: self.log.clone(),
        })?;
        Ok(t)
    }

    /// Restores a state saved by [`Self::to_tensors`]; `template` supplies
    /// shapes.
    pub fn from_tensors(t: &NamedTensors, template: &Theta) -> Result<Self> {
        t.require_format(STATE_FORMAT)?;
        let meta: StateMeta = serde_json::from_value(t.metadata.clone())?;
        let mut theta = template.clone();
        let mut best = template.clone();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in theta.named_mut() {
            *p = t.expect(&format!("theta/{name}"), p.rows(), p.cols())?;
            m.push(t.expect(&format!("adam_m/{name}"), p.rows(), p.cols())?);
            v.push(t.expect(&format!("adam_v/{name}"), p.rows(), p.cols())?);
        }
        for (name, p) in best.named_mut() {
            *p = t.expect(&format!("best/{name}"), p.rows(), p.cols())?;
        }
        Ok(Self {
            step: meta.step,
            epoch: meta.epoch,
            theta,
            optimizer: AdamW { m, v, t: meta.adam_t },
            best,
            best_val_hr1: meta.best_val_hr1,
            best_epoch: meta.best_epoch,
            stale_epochs: meta.stale_epochs,
            stopped: meta.stopped,
            log: meta.log,
        })
    }

    pub fn log_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// HR@1 of constrained decoding over `examples`; evaluated in parallel,
/// counted in order.
pub fn hit_rate(model: &Model, theta: &Theta, examples: &[EncodedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::UndefinedMetric("HR@1 over zero examples".into()));
    }
    let hits = predict_all(model, theta, examples)?
        .iter()
        .zip(examples)
        .filter(|(p, ex)| **p == crate::dataset::LETTERS[ex.prompt.target_index])
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

pub fn predict_all(model: &Model, theta: &Theta, examples: &[EncodedExample]) -> Result<Vec<char>> {
    examples.par_iter().map(|ex| model.predict(theta, ex)).collect()
}

/// Mean loss and summed-then-averaged gradients over a batch, reduced in
/// batch order.
pub fn batch_gradient(model: &Model, theta: &Theta, batch: &[&EncodedExample]) -> Result<(f64, Vec<Matrix>)> {
    let parts: Vec<(f64, Vec<Matrix>)> = batch.par_iter().map(|ex| model.loss_and_grad(theta, ex)).collect::<Result<_>>()?;
    let mut total = theta.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (t, gi) in total.iter_mut().zip(g) {
            t.add_assign(gi);
        }
    }
    let n = batch.len() as f64;
    for t in &mut total {
        *t = t.scale(1.0 / n);
    }
    Ok((loss / n, total))
}

/// Trains until `cfg.epochs` are complete or an early-stop rule fires,
/// running at most `max_epochs` more epochs in this call.
pub fn train(
    model: &Model,
    mut state: TrainState,
    train: &[EncodedExample],
    val: &[EncodedExample],
    cfg: &TrainConfig,
    max_epochs: Option<usize>,
) -> Result<TrainState> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    let n = train.len();
    let mut ran = 0;
    while state.epoch < cfg.epochs && !state.stopped && max_epochs.is_none_or(|m| ran < m) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &["epoch", &state.epoch.to_string()])));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(model, &state.theta, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let last = state.log.iter().rev().find(|r| r.loss.is_finite());
                return Err(Error::numeric(match last {
                    Some(r) => format!("loss diverged at step {}; last finite step {} had loss {}", state.step, r.step, r.loss),
                    None => format!("loss diverged at step {} before any finite step", state.step),
                }));
            }
            let lr = cfg.lr_at(state.step, n);
            state.optimizer.step(state.theta.named_mut().into_iter().map(|(_, m)| m).collect(), &grads, lr, &cfg.hyper());
            state.log.push(LogRecord { step: state.step, epoch: state.epoch, loss, lr, val_hr1: None });
            state.step += 1;
        }
        let hr = if val.is_empty() { None } else { Some(hit_rate(model, &state.theta, val)?) };
        if let Some(last) = state.log.last_mut() {
            last.val_hr1 = hr;
        }
        let improved = match (hr, state.best_val_hr1) {
            (Some(h), Some(b)) => h > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            state.best = state.theta.clone();
            state.best_val_hr1 = hr;
            state.best_epoch = Some(state.epoch);
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        state.epoch += 1;
        ran += 1;
        if hr.zip(cfg.stop_at_val_hr).is_some_and(|(h, s)| h >= s) || cfg.patience.is_some_and(|p| state.stale_epochs >= p) {
            state.stopped = true;
        }
    }
    Ok(state)
}

//! Training loop: windowed minibatches, MSE loss, Adam with a step
//! learning-rate decay, and a CSV loss log.

use crate::autodiff::{ParamSet, Tape, Var};
use crate::data::{normalize_force, RecordingSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per input window; the target is the last frame's force.
    pub window: usize,
    pub base_lr: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    /// Multiplier applied at each decay.
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 64,
            window: 20,
            base_lr: 1e-4,
            lr_decay_every: 30,
            lr_decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config(
                "epochs, batch_size, and window must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::Config("learning-rate schedule must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

// ---------------------------------------------------------------------------
// Adam

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First and second moment estimates, one tensor pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
        }
    }

    /// One Adam update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (slot, p) in params.iter_mut().enumerate() {
            if !p.grad.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter '{}'",
                    p.id
                )));
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Minibatch sampling

/// A training sample: the window ending at frame `end` of set `set`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub set: usize,
    pub end: usize,
}

/// Draw a minibatch: each sample picks a set uniformly, then an end frame
/// uniformly within it.
pub fn sample_minibatch(
    sets: &[RecordingSet],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<WindowRef>> {
    if sets.is_empty() {
        return Err(Error::Contract("no training sets".into()));
    }
    Ok((0..batch_size)
        .map(|_| {
            let set = rng.gen_range(0..sets.len());
            let end = rng.gen_range(0..sets[set].frames.len());
            WindowRef { set, end }
        })
        .collect())
}

/// Materialize the `window` frames ending at `end`, repeating the set's
/// first frame when the window starts before the recording does.
pub fn window_frames(set: &RecordingSet, end: usize, window: usize) -> Vec<Tensor> {
    (0..window)
        .map(|d| {
            let want = (end + d + 1).checked_sub(window);
            set.frames[want.unwrap_or(0)].clone()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Loop

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epochs_run: usize,
}

/// Train `model` in place on `sets`, logging `epoch,step,lr,loss` CSV rows
/// to `log`. Loss is the batch-mean squared error on normalized forces.
/// A non-finite loss or gradient aborts the run with the parameters
/// restored to the end of the last completed epoch.
pub fn train(
    model: &mut Model,
    sets: &[RecordingSet],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if sets.is_empty() {
        return Err(Error::Contract("no training sets".into()));
    }
    let total_frames: usize = sets.iter().map(|s| s.frames.len()).sum();
    let steps_per_epoch = (total_frames / cfg.batch_size).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    writeln!(log, "epoch,step,lr,loss").map_err(|e| Error::Io(format!("loss log: {e}")))?;
    let mut last_good = model.params.clone();
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for step in 0..steps_per_epoch {
            let batch = sample_minibatch(sets, cfg.batch_size, &mut rng)?;
            match train_step(model, sets, &batch, cfg.window, &mut adam, lr) {
                Ok(loss) => {
                    last_loss = loss;
                    writeln!(log, "{epoch},{step},{lr},{loss}")
                        .map_err(|e| Error::Io(format!("loss log: {e}")))?;
                }
                Err(e) => {
                    model.params = last_good;
                    return Err(e);
                }
            }
        }
        last_good = model.params.clone();
    }
    Ok(TrainReport {
        final_loss: last_loss,
        epochs_run: cfg.epochs,
    })
}

/// One optimizer step over a batch; returns the batch loss.
fn train_step(
    model: &mut Model,
    sets: &[RecordingSet],
    batch: &[WindowRef],
    window: usize,
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    model.params.zero_grads();
    let mut loss_sum = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for wr in batch {
        let set = &sets[wr.set];
        let frames = window_frames(set, wr.end, window);
        let target = normalize_force(set.forces[wr.end]);
        let mut tape = Tape::new();
        let vars: Vec<Var> = frames.into_iter().map(|f| tape.leaf(f)).collect();
        let pred = model.forward_window(&mut tape, &vars)?;
        let t = tape.leaf(Tensor::scalar(target));
        let diff = tape.sub(pred, t)?;
        let loss = tape.mul(diff, diff)?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss_val} on set {} frame {}",
                set.name, wr.end
            )));
        }
        loss_sum += loss_val;
        let grads = tape.backward(loss)?;
        grads.accumulate_scaled(&mut model.params, scale);
    }
    adam.step(&mut model.params, lr)?;
    Ok(loss_sum * scale)
}

//! Optimizers and the local-update inner loop.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autoencoder::{fold_bn, Autoencoder, LossKind, SampleSet};
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamSet};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub lr_drop_factor: f64,
    /// Rounds without sufficient validation improvement before the single drop.
    pub lr_patience: usize,
    /// Improvement (dB) that resets the patience counter.
    pub lr_min_improvement_db: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            local_epochs: 2,
            learning_rate: 1e-3,
            lr_drop_factor: 0.1,
            lr_patience: 20,
            lr_min_improvement_db: 0.01,
            optimizer: OptimizerKind::Adam,
            loss: LossKind::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.local_epochs == 0 || self.lr_patience == 0 {
            return Err(Error::InvalidConfig(
                "batch size, local epochs and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be finite and >= 0".into()));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::InvalidConfig("lr_drop_factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments mirroring the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(ps: &ParamSet) -> Self {
        Self {
            m: vec![0.0; ps.numel()],
            v: vec![0.0; ps.numel()],
            step: 0,
        }
    }
}

fn check_grads(ps: &ParamSet, grads: &Grads) -> Result<()> {
    if grads.as_slice().len() != ps.numel() {
        return Err(Error::LengthMismatch {
            expected: ps.numel(),
            actual: grads.as_slice().len(),
        });
    }
    Ok(())
}

/// Adam with bias correction. Non-trainable entries are left untouched.
pub fn adam_step(ps: &mut ParamSet, grads: &Grads, state: &mut AdamState, lr: f64) -> Result<()> {
    check_grads(ps, grads)?;
    if state.m.len() != ps.numel() {
        return Err(Error::LengthMismatch {
            expected: ps.numel(),
            actual: state.m.len(),
        });
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
    let g = grads.as_slice();
    let offsets = ps.offsets();
    for (idx, &off) in offsets.iter().enumerate() {
        if !ps.entry(idx).trainable {
            continue;
        }
        let w = ps.tensor_mut(idx).data_mut();
        for (j, wj) in w.iter_mut().enumerate() {
            let k = off + j;
            state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g[k];
            state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let mhat = state.m[k] / c1;
            let vhat = state.v[k] / c2;
            *wj -= lr * mhat / (libm::sqrt(vhat) + ADAM_EPS);
        }
    }
    Ok(())
}

/// Plain gradient descent `w <- w - lr g` on trainable entries.
pub fn sgd_step(ps: &mut ParamSet, grads: &Grads, lr: f64) -> Result<()> {
    check_grads(ps, grads)?;
    let g = grads.as_slice();
    let offsets = ps.offsets();
    for (idx, &off) in offsets.iter().enumerate() {
        if !ps.entry(idx).trainable {
            continue;
        }
        for (j, wj) in ps.tensor_mut(idx).data_mut().iter_mut().enumerate() {
            *wj -= lr * g[off + j];
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, ps: &ParamSet) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(ps)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &Grads, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(s) => adam_step(ps, grads, s, lr),
            Optimizer::Sgd => sgd_step(ps, grads, lr),
        }
    }
}

/// One optimizer step on one mini-batch; returns the batch loss.
pub fn train_step(
    ae: &Autoencoder,
    ps: &mut ParamSet,
    batch: &SampleSet,
    loss: LossKind,
    opt: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    let (l, grads, obs) = ae.loss_and_grad(ps, batch, loss)?;
    if !l.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    opt.step(ps, &grads, lr)?;
    fold_bn(ps, &obs);
    Ok(l)
}

/// Runs `epochs` shuffled passes over `data`, capped at `max_steps` optimizer
/// steps when given. Returns the mean batch loss of every (possibly partial)
/// epoch and the number of steps taken.
#[allow(clippy::too_many_arguments)]
pub fn run_epochs(
    ae: &Autoencoder,
    ps: &mut ParamSet,
    data: &SampleSet,
    tc: &TrainConfig,
    lr: f64,
    epochs: usize,
    max_steps: Option<usize>,
    opt: &mut Optimizer,
    rng: &mut SimRng,
) -> Result<(Vec<f64>, usize)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = Vec::with_capacity(data.len());
    let mut history = Vec::with_capacity(epochs);
    let mut steps = 0;
    'outer: for _ in 0..epochs {
        // Each epoch permutes from the identity, so splitting a run into
        // several calls replays the same batches.
        order.clear();
        order.extend(0..data.len());
        order.shuffle(rng);
        let (mut acc, mut count) = (0.0, 0);
        for chunk in order.chunks(tc.batch_size) {
            if max_steps.is_some_and(|m| steps >= m) {
                if count > 0 {
                    history.push(acc / count as f64);
                }
                break 'outer;
            }
            acc += train_step(ae, ps, &data.gather(chunk), tc.loss, opt, lr)?;
            count += 1;
            steps += 1;
        }
        history.push(acc / count as f64);
    }
    Ok((history, steps))
}

/// Endless shuffled mini-batch sequence; reshuffles at every epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: 0,
            batch_size,
        }
    }

    pub fn next_batch(&mut self, rng: &mut SimRng) -> &[usize] {
        if self.pos == 0 {
            self.order.shuffle(rng);
        }
        let start = self.pos;
        let end = (start + self.batch_size).min(self.order.len());
        self.pos = if end == self.order.len() { 0 } else { end };
        &self.order[start..end]
    }
}

/// `steps` optimizer steps drawn from `stream`; returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_steps(
    ae: &Autoencoder,
    ps: &mut ParamSet,
    data: &SampleSet,
    tc: &TrainConfig,
    lr: f64,
    steps: usize,
    opt: &mut Optimizer,
    stream: &mut BatchStream,
    rng: &mut SimRng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for _ in 0..steps {
        let batch = data.gather(stream.next_batch(rng));
        acc += train_step(ae, ps, &batch, tc.loss, opt, lr)?;
    }
    Ok(if steps == 0 { 0.0 } else { acc / steps as f64 })
}

/// Result of one UE's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// Flattened `w_after - w_before`.
    pub delta: Vec<f64>,
    /// Mean batch loss per local epoch.
    pub losses: Vec<f64>,
}

/// `E` local epochs from `ps` with a fresh optimizer; `ps` is not modified.
pub fn local_update(
    ae: &Autoencoder,
    ps: &ParamSet,
    data: &SampleSet,
    tc: &TrainConfig,
    lr: f64,
    rng: &mut SimRng,
) -> Result<LocalUpdate> {
    let mut w = ps.clone();
    let mut opt = Optimizer::new(tc.optimizer, &w);
    let (losses, _) = run_epochs(ae, &mut w, data, tc, lr, tc.local_epochs, None, &mut opt, rng)?;
    let delta = w
        .flatten()
        .iter()
        .zip(ps.flatten())
        .map(|(a, b)| a - b)
        .collect();
    Ok(LocalUpdate { delta, losses })
}

/// Number of mini-batches in one epoch over `n` samples (last partial kept).
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// One-shot learning-rate drop after the validation metric stalls.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    min_improvement_db: f64,
    best_db: f64,
    stale: usize,
    dropped: bool,
}

impl PlateauSchedule {
    pub fn new(tc: &TrainConfig) -> Self {
        Self {
            lr: tc.learning_rate,
            factor: tc.lr_drop_factor,
            patience: tc.lr_patience,
            min_improvement_db: tc.lr_min_improvement_db,
            best_db: f64::INFINITY,
            stale: 0,
            dropped: false,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn dropped(&self) -> bool {
        self.dropped
    }

    /// Records one round's validation NMSE in dB. The reference level only
    /// moves when beaten by the margin, so slow steady progress still
    /// counts once it adds up to the margin.
    pub fn observe(&mut self, metric_db: f64) {
        if metric_db < self.best_db - self.min_improvement_db {
            self.best_db = metric_db;
            self.stale = 0;
            return;
        }
        self.stale += 1;
        if !self.dropped && self.stale >= self.patience {
            self.lr *= self.factor;
            self.dropped = true;
        }
    }
}

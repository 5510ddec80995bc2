use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::netcore::{OptimConfig, Optimizer};

use super::model::TtnpbModel;
use super::train::{batch_pass, Window};
use super::{Episode, ParametricBias, Step, TtnpbError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    /// Updates start once the buffer holds this many steps.
    pub threshold: usize,
    /// Oldest steps are dropped beyond this.
    pub capacity: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// The step size after `k` updates is `lr / (1 + k / decay)`; 0 keeps it
    /// constant. A constant step leaves the PB biased by an amount that grows
    /// with `lr`.
    pub decay: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self { threshold: 10, capacity: 30, epochs: 3, lr: 0.1, momentum: 0.9, decay: 0.0 }
    }
}

impl OnlineConfig {
    pub fn optimizer(&self) -> Optimizer {
        Optimizer::new(OptimConfig::momentum_sgd(self.lr, self.momentum), 2)
    }

    /// Step size of update number `k` (from zero).
    pub fn lr_at(&self, k: u64) -> f64 {
        if self.decay > 0.0 {
            self.lr / (1.0 + k as f64 / self.decay)
        } else {
            self.lr
        }
    }
}

/// Ring buffer of the most recent contiguous steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineBuffer {
    steps: VecDeque<Step>,
    capacity: usize,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 2, "buffer must hold at least one transition");
        Self { steps: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, step: Step) {
        if self.steps.len() == self.capacity {
            self.steps.pop_front();
        }
        self.steps.push_back(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter()
    }

    /// The most recent `n` steps (fewer if the buffer is shorter), oldest first.
    pub fn tail(&self, n: usize) -> Vec<Step> {
        let skip = self.steps.len().saturating_sub(n);
        self.steps.iter().skip(skip).copied().collect()
    }
}

/// `epochs` momentum-SGD steps on `p` alone, each over the whole buffer as
/// one window with the recurrent state reset at its start. Weights are only
/// read.
pub fn online_update_pb(
    model: &TtnpbModel,
    buffer: &OnlineBuffer,
    p: ParametricBias,
    optim: &mut Optimizer,
    config: &OnlineConfig,
) -> Result<ParametricBias, TtnpbError> {
    let needed = config.threshold.max(2);
    if buffer.len() < needed {
        return Err(TtnpbError::BufferTooSmall { len: buffer.len(), needed });
    }
    let episode = [Episode { material: String::new(), trial: 0, steps: buffer.steps().copied().collect() }];
    let window = [Window { episode: 0, start: 0, len: buffer.len() - 1 }];
    optim.set_lr(config.lr_at(optim.steps_taken() / config.epochs.max(1) as u64));
    let mut p = p;
    for _ in 0..config.epochs {
        let r = batch_pass(model, &episode, &window, &[p], Some(false))?;
        optim.step(&mut p.0, &r.pb_grads[0]);
    }
    Ok(p)
}

/// Buffer, PB and optimizer state for continuous surface recognition.
#[derive(Debug, Clone)]
pub struct OnlinePb {
    pub p: ParametricBias,
    pub config: OnlineConfig,
    pub buffer: OnlineBuffer,
    optim: Optimizer,
}

impl OnlinePb {
    pub fn new(p: ParametricBias, config: OnlineConfig) -> Self {
        Self { p, config, buffer: OnlineBuffer::new(config.capacity), optim: config.optimizer() }
    }

    /// Records a step and, once the buffer is past the threshold, updates the
    /// PB. Returns the new PB when an update happened.
    pub fn observe(&mut self, model: &TtnpbModel, step: Step) -> Result<Option<ParametricBias>, TtnpbError> {
        self.buffer.push(step);
        if self.buffer.len() < self.config.threshold.max(2) {
            return Ok(None);
        }
        self.p = online_update_pb(model, &self.buffer, self.p, &mut self.optim, &self.config)?;
        Ok(Some(self.p))
    }
}

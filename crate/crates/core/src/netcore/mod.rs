//! Minimal differentiable network kernel: fully-connected and LSTM layers
//! with reverse-mode gradients for weights and inputs, plus Adam and
//! momentum SGD.
//!
//! All data is `f64`, row-major, with a leading batch dimension. A network
//! is evaluated one time step at a time; LSTM layers carry their state in a
//! [`RecurrentState`] and a [`Tape`] records whatever the backward pass needs.

mod checkpoint;
mod gemm;
mod optim;
mod tape;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{read_segment, write_segment, SEGMENT_VERSION};
pub use optim::{OptimConfig, Optimizer, UpdateRule};
pub use tape::{Backward, Gradients, Tape};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid layer stack: {0}")]
    BadSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    FullyConnected,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Ignored by LSTM layers, whose output is `o * tanh(c)`.
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn fc(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { kind: LayerKind::FullyConnected, in_dim, out_dim, activation }
    }

    pub const fn lstm(in_dim: usize, hidden: usize) -> Self {
        Self { kind: LayerKind::Lstm, in_dim, out_dim: hidden, activation: Activation::Tanh }
    }

    /// FC: `W (out x in)` then `b (out)`. LSTM: `W_ih (4H x in)`,
    /// `W_hh (4H x H)`, `b (4H)` with gate blocks ordered input, forget,
    /// candidate, output.
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => self.out_dim * self.in_dim + self.out_dim,
            LayerKind::Lstm => {
                let g = 4 * self.out_dim;
                g * self.in_dim + g * self.out_dim + g
            }
        }
    }
}

pub fn param_count(specs: &[LayerSpec]) -> usize {
    specs.iter().map(LayerSpec::param_count).sum()
}

/// Layer stack plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    offsets: Vec<usize>,
    weights: Vec<f64>,
}

impl Network {
    /// All-zero weights.
    pub fn zeros(specs: Vec<LayerSpec>) -> Result<Self, NetError> {
        validate(&specs)?;
        let mut offsets = Vec::with_capacity(specs.len());
        let mut total = 0;
        for s in &specs {
            offsets.push(total);
            total += s.param_count();
        }
        Ok(Self { specs, offsets, weights: vec![0.0; total] })
    }

    /// Uniform `+-1/sqrt(fan_in)` weights, LSTM forget-gate bias `+1`.
    pub fn init<R: Rng + ?Sized>(specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(specs)?;
        for (l, spec) in net.specs.clone().iter().enumerate() {
            let fan_in = match spec.kind {
                LayerKind::FullyConnected => spec.in_dim,
                LayerKind::Lstm => spec.in_dim + spec.out_dim,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let block = net.layer_weights_mut(l);
            for w in block.iter_mut() {
                *w = dist.sample(rng);
            }
            if spec.kind == LayerKind::Lstm {
                let h = spec.out_dim;
                let bias_start = block.len() - 4 * h;
                for b in &mut block[bias_start + h..bias_start + 2 * h] {
                    *b = 1.0;
                }
            }
        }
        Ok(net)
    }

    pub fn from_parts(specs: Vec<LayerSpec>, weights: Vec<f64>) -> Result<Self, NetError> {
        let mut net = Self::zeros(specs)?;
        if weights.len() != net.weights.len() {
            return Err(NetError::DimensionMismatch { expected: net.weights.len(), got: weights.len() });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(NetError::BadSpec("non-finite weight".into()));
        }
        net.weights = weights;
        Ok(net)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        let start = self.offsets[layer];
        &self.weights[start..start + self.specs[layer].param_count()]
    }

    pub fn layer_weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let start = self.offsets[layer];
        let len = self.specs[layer].param_count();
        &mut self.weights[start..start + len]
    }

    pub(crate) fn offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState {
        RecurrentState {
            batch,
            layers: self
                .specs
                .iter()
                .filter(|s| s.kind == LayerKind::Lstm)
                .map(|s| LstmState { h: vec![0.0; batch * s.out_dim], c: vec![0.0; batch * s.out_dim] })
                .collect(),
        }
    }
}

fn validate(specs: &[LayerSpec]) -> Result<(), NetError> {
    if specs.is_empty() {
        return Err(NetError::BadSpec("empty layer stack".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(NetError::BadSpec(format!("layer {i} has a zero dimension")));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(NetError::BadSpec(format!(
                "layer {i} expects {} inputs but layer {} emits {}",
                s.in_dim,
                i - 1,
                specs[i - 1].out_dim
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Hidden and cell vectors of every LSTM layer, `batch x hidden` each.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub batch: usize,
    pub layers: Vec<LstmState>,
}

impl RecurrentState {
    /// Copies a single-row state into every row of a `batch`-row state.
    pub fn broadcast(&self, batch: usize) -> Self {
        assert_eq!(self.batch, 1, "only single-row states can be broadcast");
        Self {
            batch,
            layers: self
                .layers
                .iter()
                .map(|l| LstmState { h: l.h.repeat(batch), c: l.c.repeat(batch) })
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.h.iter_mut().for_each(|v| *v = 0.0);
            l.c.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

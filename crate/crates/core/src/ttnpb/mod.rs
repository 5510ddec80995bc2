//! Tactile transition network with parametric bias (PB): model assembly,
//! joint weight/PB training, online PB-only adaptation and PB-space PCA.

mod checkpoint;
mod episode;
mod model;
mod online;
mod pca;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctrl::ControlInput;
use crate::netcore::NetError;
use crate::sim::SensorFrame;

pub use checkpoint::{sha256_hex, Checkpoint, CHECKPOINT_VERSION};
pub use episode::{read_episode, read_episode_dir, write_episode, EpisodeRecord};
pub use model::{
    ttnpb_specs, Scaling, TtnpbModel, INPUT_DIM, N_F, N_P, N_U, N_X, P_OFFSET, U_OFFSET, X_OFFSET,
};
pub use online::{online_update_pb, OnlineBuffer, OnlinePb, OnlineConfig};
pub use pca::{pb_pca, silhouette, Pca};
pub use train::{fit_pb, train, train_with_specs, windows, TrainConfig, TrainOutcome, Trainer, Window};

#[derive(Debug, Error)]
pub enum TtnpbError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("online buffer holds {len} steps, at least {needed} required")]
    BufferTooSmall { len: usize, needed: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss during training at epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Two-dimensional learnable input encoding the surface dynamics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ParametricBias(pub [f64; 2]);

impl ParametricBias {
    pub fn distance(&self, other: &ParametricBias) -> f64 {
        (self.0[0] - other.0[0]).hypot(self.0[1] - other.0[1])
    }

    pub fn norm(&self) -> f64 {
        self.0[0].hypot(self.0[1])
    }
}

/// One control tick: the frame observed, the hand position and the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub frame: SensorFrame,
    pub position: [f64; 3],
    pub input: ControlInput,
}

/// Contiguous 5 Hz steps recorded on one material in one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub material: String,
    pub trial: u32,
    pub steps: Vec<Step>,
}

/// One PB per surface material, shared by all of its trials.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PbTable(pub BTreeMap<String, ParametricBias>);

impl PbTable {
    pub fn get(&self, material: &str) -> Option<&ParametricBias> {
        self.0.get(material)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Closest entry to `p`, ties broken by name order.
    pub fn nearest(&self, p: &ParametricBias) -> Option<(&str, f64)> {
        self.0
            .iter()
            .map(|(k, v)| (k.as_str(), v.distance(p)))
            .fold(None, |best, cur| match best {
                Some((_, d)) if d <= cur.1 => best,
                _ => Some(cur),
            })
    }
}

#[cfg(test)]
mod tests;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctrl::{ControlInput, F_MAX, TAU_MAX};
use crate::netcore::{Activation, LayerSpec, NetError, Network, RecurrentState};
use crate::sim::{SensorFrame, FRAME_DIM};

use super::{ParametricBias, Step};

pub const N_F: usize = FRAME_DIM;
pub const N_X: usize = 3;
pub const N_U: usize = 3;
pub const N_P: usize = 2;
pub const INPUT_DIM: usize = N_F + N_X + N_U + N_P;

pub const X_OFFSET: usize = N_F;
pub const U_OFFSET: usize = N_F + N_X;
pub const P_OFFSET: usize = N_F + N_X + N_U;

/// The 10-layer stack: four FC, two LSTM, four FC. Hidden FC layers use
/// tanh; the output layer is linear.
pub fn ttnpb_specs() -> Vec<LayerSpec> {
    use Activation::{Linear, Tanh};
    vec![
        LayerSpec::fc(INPUT_DIM, 300, Tanh),
        LayerSpec::fc(300, 200, Tanh),
        LayerSpec::fc(200, 100, Tanh),
        LayerSpec::fc(100, 100, Tanh),
        LayerSpec::lstm(100, 100),
        LayerSpec::lstm(100, 100),
        LayerSpec::fc(100, 100, Tanh),
        LayerSpec::fc(100, 200, Tanh),
        LayerSpec::fc(200, 300, Tanh),
        LayerSpec::fc(300, N_F, Linear),
    ]
}

/// Fixed normalization of network inputs and outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scaling {
    pub force: f64,
    pub torque: f64,
    pub f_ref: f64,
    pub pos_center: [f64; 3],
    pub pos_half: [f64; 3],
}

impl Default for Scaling {
    fn default() -> Self {
        Self {
            force: 200.0,
            torque: TAU_MAX,
            f_ref: F_MAX,
            pos_center: [60.0, 30.0, 0.0],
            pos_half: [60.0, 30.0, 10.0],
        }
    }
}

impl Scaling {
    pub fn frame(&self, frame: &SensorFrame) -> [f64; N_F] {
        frame.to_flat().map(|v| v / self.force)
    }

    pub fn unframe(&self, scaled: &[f64]) -> SensorFrame {
        let raw: Vec<f64> = scaled.iter().map(|v| v * self.force).collect();
        SensorFrame::from_flat(&raw)
    }

    pub fn position(&self, x: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| (x[k] - self.pos_center[k]) / self.pos_half[k])
    }

    pub fn input(&self, u: &ControlInput) -> [f64; 3] {
        [u.tau_roll_ref / self.torque, u.tau_pitch_ref / self.torque, u.f_z_ref / self.f_ref]
    }

    pub fn uninput(&self, s: &[f64; 3]) -> ControlInput {
        ControlInput {
            tau_roll_ref: s[0] * self.torque,
            tau_pitch_ref: s[1] * self.torque,
            f_z_ref: s[2] * self.f_ref,
        }
    }

    /// Full scaled input row `[F | x | u | p]`.
    pub fn row(&self, frame: &SensorFrame, x: &[f64; 3], u: &ControlInput, p: &ParametricBias) -> [f64; INPUT_DIM] {
        let mut row = [0.0; INPUT_DIM];
        row[..N_F].copy_from_slice(&self.frame(frame));
        row[X_OFFSET..U_OFFSET].copy_from_slice(&self.position(x));
        row[U_OFFSET..P_OFFSET].copy_from_slice(&self.input(u));
        row[P_OFFSET..].copy_from_slice(&p.0);
        row
    }

    pub fn step_row(&self, step: &Step, p: &ParametricBias) -> [f64; INPUT_DIM] {
        self.row(&step.frame, &step.position, &step.input, p)
    }
}

/// Tactile transition network: `F_{t+1} = h(F_t, x_t, u_t, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TtnpbModel {
    pub net: Network,
    pub scaling: Scaling,
}

impl TtnpbModel {
    pub fn new<R: Rng + ?Sized>(scaling: Scaling, rng: &mut R) -> Self {
        Self::with_specs(ttnpb_specs(), scaling, rng).expect("standard stack is valid")
    }

    /// Same interface over a custom stack; must map `INPUT_DIM` to `N_F`.
    pub fn with_specs<R: Rng + ?Sized>(
        specs: Vec<LayerSpec>,
        scaling: Scaling,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let net = Network::init(specs, rng)?;
        Self::from_network(net, scaling)
    }

    pub fn from_network(net: Network, scaling: Scaling) -> Result<Self, NetError> {
        if net.in_dim() != INPUT_DIM {
            return Err(NetError::DimensionMismatch { expected: INPUT_DIM, got: net.in_dim() });
        }
        if net.out_dim() != N_F {
            return Err(NetError::DimensionMismatch { expected: N_F, got: net.out_dim() });
        }
        Ok(Self { net, scaling })
    }

    pub fn zero_state(&self) -> RecurrentState {
        self.net.zero_state(1)
    }

    /// One-step prediction in raw units; advances `state`.
    pub fn predict(
        &self,
        frame: &SensorFrame,
        x: &[f64; 3],
        u: &ControlInput,
        p: &ParametricBias,
        state: &mut RecurrentState,
    ) -> Result<SensorFrame, NetError> {
        let row = self.scaling.row(frame, x, u, p);
        let out = self.net.forward(&row, state, None)?;
        Ok(self.scaling.unframe(&out))
    }

    /// Recurrent state after feeding `steps` from a zeroed state.
    pub fn warm_state(&self, steps: &[Step], p: &ParametricBias) -> Result<RecurrentState, NetError> {
        let mut state = self.zero_state();
        for s in steps {
            self.net.forward(&self.scaling.step_row(s, p), &mut state, None)?;
        }
        Ok(state)
    }
}

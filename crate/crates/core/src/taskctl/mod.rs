//! Gradient-through-model predictive control over a short horizon, the
//! task losses it minimizes and the evaluation metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctrl::{ControlInput, F_MAX, F_MIN, TAU_MAX, TAU_MIN};
use crate::netcore::{Backward, NetError, RecurrentState, Tape};
use crate::sim::{taxel_layout, SensorFrame, N_TAXELS};
use crate::ttnpb::{ParametricBias, TtnpbModel, INPUT_DIM, N_F, P_OFFSET, U_OFFSET, X_OFFSET};

/// Control horizon: model expansions per optimization.
pub const N_STEP: usize = 4;
/// Normal-force target for tracking and right-bias losses.
pub const F_REF: f64 = 200.0;

/// Plan in scaled input units (`tau / 50`, `f / 300`).
pub type ScaledPlan = [[f64; 3]; N_STEP];

const U_SCALE: [f64; 3] = [TAU_MAX, TAU_MAX, F_MAX];
const U_LO: [f64; 3] = [TAU_MIN / TAU_MAX, TAU_MIN / TAU_MAX, F_MIN / F_MAX];
const U_HI: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("non-finite task loss; keeping the initial plan")]
    NonFiniteLoss { init: HorizonPlan },
    #[error("empty frame history")]
    EmptyHistory,
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonPlan {
    pub u: [ControlInput; N_STEP],
}

impl HorizonPlan {
    /// Basic input repeated over the horizon.
    pub fn cold() -> Self {
        Self { u: [ControlInput::basic(); N_STEP] }
    }

    /// Warm start for the next tick: drop the first element, repeat the last.
    pub fn shifted(&self) -> Self {
        let mut u = self.u;
        u.rotate_left(1);
        u[N_STEP - 1] = u[N_STEP - 2];
        Self { u }
    }

    pub fn first(&self) -> ControlInput {
        self.u[0]
    }

    pub fn to_scaled(&self) -> ScaledPlan {
        self.u.map(|u| {
            let a = u.to_array();
            std::array::from_fn(|k| a[k] / U_SCALE[k])
        })
    }

    pub fn from_scaled(s: &ScaledPlan) -> Self {
        Self { u: s.map(|v| ControlInput::from_array(std::array::from_fn(|k| v[k] * U_SCALE[k])).clamped()) }
    }

    pub fn in_bounds(&self) -> bool {
        self.u.iter().all(ControlInput::in_bounds)
    }
}

/// Clamp a scaled plan to the input box.
pub fn project(plan: &ScaledPlan) -> ScaledPlan {
    plan.map(|u| std::array::from_fn(|k| u[k].clamp(U_LO[k], U_HI[k])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLossKind {
    /// Normal force tracks `F_REF` on every taxel.
    #[serde(rename = "track")]
    TrackNormal,
    /// Small spread of lateral shear across taxels.
    #[serde(rename = "shearvar")]
    ShearVarianceMin,
    /// `F_REF` on the right column, nothing elsewhere.
    #[serde(rename = "biasright")]
    BiasRight,
}

impl TaskLossKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TrackNormal => "track",
            Self::ShearVarianceMin => "shearvar",
            Self::BiasRight => "biasright",
        }
    }
}

impl std::str::FromStr for TaskLossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "track" => Ok(Self::TrackNormal),
            "shearvar" => Ok(Self::ShearVarianceMin),
            "biasright" => Ok(Self::BiasRight),
            _ => Err(format!("unknown loss `{s}` (track, shearvar, biasright)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub kind: TaskLossKind,
    /// Weight of the squared scaled input differences along the plan.
    pub lambda: f64,
}

impl TaskLoss {
    pub fn new(kind: TaskLossKind) -> Self {
        Self { kind, lambda: 0.01 }
    }

    /// Force term of one frame given in units of `F_REF`, and its gradient.
    fn frame_term(&self, y: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let layout = taxel_layout();
        let mut g = [0.0; N_F];
        let value = match self.kind {
            TaskLossKind::TrackNormal => (0..N_TAXELS)
                .map(|i| {
                    let e = y[3 * i + 2] - 1.0;
                    g[3 * i + 2] = 2.0 * e;
                    e * e
                })
                .sum(),
            TaskLossKind::ShearVarianceMin => {
                let n = N_TAXELS as f64;
                let mean = (0..N_TAXELS).map(|i| y[3 * i + 1]).sum::<f64>() / n;
                (0..N_TAXELS)
                    .map(|i| {
                        let d = y[3 * i + 1] - mean;
                        g[3 * i + 1] = 2.0 * d / n;
                        d * d / n
                    })
                    .sum()
            }
            TaskLossKind::BiasRight => (0..N_TAXELS)
                .map(|i| {
                    let target = if layout.is_right(i) { 1.0 } else { 0.0 };
                    let e = y[3 * i + 2] - target;
                    g[3 * i + 2] = 2.0 * e;
                    e * e
                })
                .sum(),
        };
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        value
    }

    fn horizon_weight(&self, len: usize) -> f64 {
        match self.kind {
            TaskLossKind::ShearVarianceMin => 1.0 / len as f64,
            _ => 1.0,
        }
    }

    fn smoothness(&self, plan: &[[f64; 3]], grad: Option<&mut [[f64; 3]]>) -> f64 {
        let mut total = 0.0;
        let mut g = vec![[0.0; 3]; plan.len()];
        for i in 1..plan.len() {
            for k in 0..3 {
                let d = plan[i][k] - plan[i - 1][k];
                total += d * d;
                g[i][k] += 2.0 * self.lambda * d;
                g[i - 1][k] -= 2.0 * self.lambda * d;
            }
        }
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        self.lambda * total
    }
}

/// Task loss of a predicted sequence under a plan. The force term is taken
/// in units of `F_REF` (so a tracking loss equals the summed squared
/// tracking error divided by `F_REF²`); the smoothness term uses scaled inputs.
pub fn task_loss(loss: &TaskLoss, frames: &[SensorFrame], plan: &[ControlInput]) -> f64 {
    let w = loss.horizon_weight(frames.len());
    let force: f64 = frames
        .iter()
        .map(|f| loss.frame_term(&f.to_flat().map(|v| v / F_REF), None))
        .sum();
    let scaled: Vec<[f64; 3]> =
        plan.iter().map(|u| std::array::from_fn(|k| u.to_array()[k] / U_SCALE[k])).collect();
    w * force + loss.smoothness(&scaled, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptConfig {
    /// Step sizes tried per epoch, ascending.
    pub gammas: Vec<f64>,
    pub epochs: usize,
}

impl Default for OptConfig {
    fn default() -> Self {
        let r = 10f64.powf(-0.5);
        Self { gammas: (0..5).rev().map(|j| 0.1 * r.powi(j)).collect(), epochs: 3 }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.gammas.is_empty() {
            return Err(TaskError::Config("no step sizes".into()));
        }
        if self.gammas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(TaskError::Config("step sizes must be strictly ascending".into()));
        }
        if self.gammas[0] < 0.0 || self.gammas[1..].iter().any(|g| *g <= 0.0) || !self.gammas.iter().all(|g| g.is_finite()) {
            return Err(TaskError::Config("step sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Loss over scaled plans. `losses` is evaluated for several plans at once.
pub trait Objective {
    fn losses(&self, plans: &[ScaledPlan]) -> Result<Vec<f64>, TaskError>;
    fn loss_grad(&self, plan: &ScaledPlan) -> Result<(f64, ScaledPlan), TaskError>;
}

/// Rollout of the model from the current frame under a plan. The position
/// is held at `x` and the recurrent state starts from a copy of `state`.
pub struct ModelObjective<'a> {
    pub model: &'a TtnpbModel,
    pub frame: &'a SensorFrame,
    pub x: [f64; 3],
    pub p: ParametricBias,
    pub state: &'a RecurrentState,
    pub loss: TaskLoss,
}

impl ModelObjective<'_> {
    fn rows(&self, plans: &[ScaledPlan], t: usize, prev: Option<&[f64]>) -> Vec<f64> {
        let s = &self.model.scaling;
        let f0 = s.frame(self.frame);
        let x = s.position(&self.x);
        let mut rows = vec![0.0; plans.len() * INPUT_DIM];
        for (b, plan) in plans.iter().enumerate() {
            let row = &mut rows[b * INPUT_DIM..(b + 1) * INPUT_DIM];
            match prev {
                Some(y) => row[..N_F].copy_from_slice(&y[b * N_F..(b + 1) * N_F]),
                None => row[..N_F].copy_from_slice(&f0),
            }
            row[X_OFFSET..U_OFFSET].copy_from_slice(&x);
            row[U_OFFSET..P_OFFSET].copy_from_slice(&plan[t]);
            row[P_OFFSET..].copy_from_slice(&self.p.0);
        }
        rows
    }

    /// Scaled predicted frames for each plan, `[plan][step]`.
    fn rollout(&self, plans: &[ScaledPlan], mut tape: Option<&mut Tape>) -> Result<Vec<Vec<f64>>, NetError> {
        let mut state = self.state.broadcast(plans.len());
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(N_STEP);
        for t in 0..N_STEP {
            let rows = self.rows(plans, t, outs.last().map(Vec::as_slice));
            outs.push(self.model.net.forward(&rows, &mut state, tape.as_deref_mut())?);
        }
        Ok(outs)
    }

    /// Force term of a scaled-by-`scaling.force` rollout, mapped to units of `F_REF`.
    fn force_ratio(&self) -> f64 {
        self.model.scaling.force / F_REF
    }

    /// Raw predicted frames of one plan.
    pub fn expand(&self, plan: &HorizonPlan) -> Result<Vec<SensorFrame>, NetError> {
        let outs = self.rollout(&[plan.to_scaled()], None)?;
        Ok(outs.iter().map(|y| self.model.scaling.unframe(y)).collect())
    }
}

impl Objective for ModelObjective<'_> {
    fn losses(&self, plans: &[ScaledPlan]) -> Result<Vec<f64>, TaskError> {
        let outs = self.rollout(plans, None)?;
        let r = self.force_ratio();
        let w = self.loss.horizon_weight(N_STEP);
        Ok(plans
            .iter()
            .enumerate()
            .map(|(b, plan)| {
                let force: f64 = outs
                    .iter()
                    .map(|y| {
                        let yb: Vec<f64> = y[b * N_F..(b + 1) * N_F].iter().map(|v| v * r).collect();
                        self.loss.frame_term(&yb, None)
                    })
                    .sum();
                w * force + self.loss.smoothness(plan, None)
            })
            .collect())
    }

    fn loss_grad(&self, plan: &ScaledPlan) -> Result<(f64, ScaledPlan), TaskError> {
        let mut tape = Tape::new();
        let outs = self.rollout(std::slice::from_ref(plan), Some(&mut tape))?;
        let r = self.force_ratio();
        let w = self.loss.horizon_weight(N_STEP);
        let mut value = 0.0;
        let mut direct = Vec::with_capacity(N_STEP);
        for y in &outs {
            let yr: Vec<f64> = y.iter().map(|v| v * r).collect();
            let mut g = [0.0; N_F];
            value += w * self.loss.frame_term(&yr, Some(&mut g));
            direct.push(g.map(|v| v * w * r));
        }
        let mut grad = [[0.0; 3]; N_STEP];
        value += self.loss.smoothness(plan, Some(&mut grad));
        let mut pass = Backward::new(&self.model.net, &tape, false);
        let mut carry = [0.0; N_F];
        for t in (0..N_STEP).rev() {
            let dy: Vec<f64> = (0..N_F).map(|k| direct[t][k] + carry[k]).collect();
            let dx = pass.step(&dy)?;
            for k in 0..3 {
                grad[t][k] += dx[U_OFFSET + k];
            }
            carry.copy_from_slice(&dx[..N_F]);
        }
        Ok((value, grad))
    }
}

/// Raw predicted frames of `plan` starting from `frame`; `state` is not mutated.
pub fn expand(
    model: &TtnpbModel,
    frame: &SensorFrame,
    x: &[f64; 3],
    plan: &HorizonPlan,
    p: &ParametricBias,
    state: &RecurrentState,
) -> Result<Vec<SensorFrame>, NetError> {
    let obj = ModelObjective { model, frame, x: *x, p: *p, state, loss: TaskLoss::new(TaskLossKind::TrackNormal) };
    obj.expand(plan)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptOutcome {
    pub plan: HorizonPlan,
    pub loss: f64,
    pub init_loss: f64,
    /// Grid index picked in each epoch.
    pub picks: Vec<usize>,
}

impl OptOutcome {
    pub fn first(&self) -> ControlInput {
        self.plan.first()
    }
}

/// Warm-started gradient descent with a step-size grid. Each epoch takes the
/// gradient at the current plan, evaluates every projected candidate and
/// moves to the best one; the best plan seen (the start included) is returned.
pub fn optimize_plan<O: Objective>(
    objective: &O,
    prev: Option<&HorizonPlan>,
    cfg: &OptConfig,
) -> Result<OptOutcome, TaskError> {
    cfg.validate()?;
    let init = prev.map_or_else(HorizonPlan::cold, HorizonPlan::shifted);
    let non_finite = || TaskError::NonFiniteLoss { init };
    let start = project(&init.to_scaled());
    let init_loss = objective.losses(&[start])?[0];
    if !init_loss.is_finite() {
        return Err(non_finite());
    }
    let mut best = (start, init_loss);
    let mut cur = start;
    let mut picks = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (_, g) = objective.loss_grad(&cur)?;
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(non_finite());
        }
        let cands: Vec<ScaledPlan> = cfg
            .gammas
            .iter()
            .map(|gamma| project(&std::array::from_fn(|t| std::array::from_fn(|k| cur[t][k] - gamma * g[t][k]))))
            .collect();
        let losses = objective.losses(&cands)?;
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(non_finite());
        }
        // ties go to the smaller step
        let j = (0..losses.len()).fold(0, |b, j| if losses[j] < losses[b] { j } else { b });
        picks.push(j);
        cur = cands[j];
        if losses[j] < best.1 {
            best = (cur, losses[j]);
        }
    }
    let plan = HorizonPlan::from_scaled(&best.0);
    Ok(OptOutcome { plan, loss: best.1, init_loss, picks })
}

/// One control tick of the predictive controller.
#[allow(clippy::too_many_arguments)]
pub fn optimize_step(
    model: &TtnpbModel,
    frame: &SensorFrame,
    x: &[f64; 3],
    state: &RecurrentState,
    prev: Option<&HorizonPlan>,
    p: &ParametricBias,
    loss: TaskLoss,
    cfg: &OptConfig,
) -> Result<OptOutcome, TaskError> {
    let obj = ModelObjective { model, frame, x: *x, p: *p, state, loss };
    optimize_plan(&obj, prev, cfg)
}

/// Per-tick evaluation values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickMetrics {
    pub e1: f64,
    /// `None` when the mean absolute shear vanishes.
    pub e2: Option<f64>,
    pub e3: f64,
}

pub fn tick_metrics(frame: &SensorFrame) -> TickMetrics {
    let layout = taxel_layout();
    let n = N_TAXELS as f64;
    let e1 = (0..N_TAXELS).map(|i| (frame.fz(i) - F_REF).powi(2)).sum::<f64>().sqrt();
    let fy = frame.axis(1);
    let abs_mean = fy.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean = fy.iter().sum::<f64>() / n;
    let std = (fy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let e2 = (abs_mean >= 1e-9).then(|| std / abs_mean);
    let (mut right, mut left) = (0.0, 0.0);
    for i in 0..N_TAXELS {
        if layout.is_right(i) {
            right += (frame.fz(i) - F_REF).powi(2);
        } else {
            left += frame.fz(i).powi(2);
        }
    }
    TickMetrics { e1, e2, e3: right.sqrt() + left.sqrt() }
}

/// Time averages of the evaluation values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub steps: usize,
    /// Steps left out of the E2 average for lack of shear.
    pub e2_excluded: usize,
}

impl Metrics {
    pub fn get(&self, kind: TaskLossKind) -> f64 {
        match kind {
            TaskLossKind::TrackNormal => self.e1,
            TaskLossKind::ShearVarianceMin => self.e2,
            TaskLossKind::BiasRight => self.e3,
        }
    }
}

pub fn eval_metrics(history: &[SensorFrame]) -> Result<Metrics, TaskError> {
    if history.is_empty() {
        return Err(TaskError::EmptyHistory);
    }
    let ticks: Vec<TickMetrics> = history.iter().map(tick_metrics).collect();
    let n = ticks.len() as f64;
    let e2s: Vec<f64> = ticks.iter().filter_map(|t| t.e2).collect();
    Ok(Metrics {
        e1: ticks.iter().map(|t| t.e1).sum::<f64>() / n,
        e2: if e2s.is_empty() { f64::NAN } else { e2s.iter().sum::<f64>() / e2s.len() as f64 },
        e3: ticks.iter().map(|t| t.e3).sum::<f64>() / n,
        steps: ticks.len(),
        e2_excluded: ticks.len() - e2s.len(),
    })
}

#[cfg(test)]
mod tests;

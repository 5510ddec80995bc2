use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PbMode, SigmaSetting};
use super::trajectory::path_for_ticks;
use super::HarnessError;
use crate::ctrl::{proportional_step, random_walk_targets, sensed_torques, mean_normal, ControlInput, CtrlState, DT};
use crate::sim::{remove_offsets, taxel_layout, MaterialParams, SensorFrame, SimState, TaxelLayout};
use crate::taskctl::{eval_metrics, optimize_step, tick_metrics, HorizonPlan, Metrics, TaskError, TaskLoss, TickMetrics};
use crate::ttnpb::{Episode, OnlinePb, ParametricBias, PbTable, Step, TtnpbModel};

/// Seed for one run, mixed from the experiment seed and a run key.
pub fn derive_seed(base: u64, key: &[u64]) -> u64 {
    // splitmix64 over the key
    let mut z = base;
    for &k in key {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Height of the nominal wiping plane, mm.
pub const WIPE_PLANE_Z: f64 = 0.0;

/// Simulated arm, inner controller and offset-corrected sensor.
#[derive(Clone)]
pub struct Rig {
    pub sim: SimState,
    pub ctrl: CtrlState,
    pub material: MaterialParams,
    pub layout: TaxelLayout,
    pub frame: SensorFrame,
    bias: SensorFrame,
    gains: crate::ctrl::Gains,
}

impl Rig {
    /// Hovers above `start`, records the no-contact bias frame.
    pub fn new(cfg: &ExperimentConfig, material: MaterialParams, seed: u64, start: [f64; 2]) -> Result<Self, HarnessError> {
        let ctrl = CtrlState::hovering(cfg.collect.hover_mm);
        let pose = ctrl.commanded_pose(start[0], start[1]);
        let mut sim = SimState::new(seed, pose, cfg.sim);
        let bias = sim.step(&material, &pose, DT)?;
        Ok(Self {
            sim,
            ctrl,
            material,
            layout: taxel_layout(),
            frame: SensorFrame::zeros(),
            bias,
            gains: cfg.gains,
        })
    }

    /// Planned hand position at path point `xy`: the path itself on the
    /// nominal wiping plane. The force-controlled depth is left out on
    /// purpose; the model holds this input fixed over its horizon, and a
    /// frozen depth would hide the force response from the rollout.
    pub fn position(&self, xy: [f64; 2]) -> [f64; 3] {
        [xy[0], xy[1], WIPE_PLANE_Z]
    }

    /// Applies `u` through the inner controller, moves toward `xy` and
    /// returns the next frame.
    pub fn tick(&mut self, u: &ControlInput, xy: [f64; 2]) -> Result<SensorFrame, HarnessError> {
        let (next, _) = proportional_step(&self.ctrl, u, &self.frame, &self.layout, &self.gains);
        self.ctrl = next;
        let raw = self.sim.step(&self.material, &self.ctrl.commanded_pose(xy[0], xy[1]), DT)?;
        self.frame = remove_offsets(&raw, &self.bias);
        Ok(self.frame)
    }
}

fn material_params(cfg: &ExperimentConfig, name: &str) -> Result<MaterialParams, HarnessError> {
    let lib = cfg.library()?;
    lib.get(name)
        .map(|m| m.params)
        .ok_or_else(|| HarnessError::Config(format!("unknown material `{name}`")))
}

/// Settles on the start point with basic input, then drives the path with a
/// random walk on the targets. Returns the recorded steps.
pub fn random_walk_episode(
    cfg: &ExperimentConfig,
    material: &str,
    trial: u32,
    sigma: SigmaSetting,
    steps: usize,
    sim_seed: u64,
    walk_seed: u64,
) -> Result<Episode, HarnessError> {
    let params = material_params(cfg, material)?;
    let path = path_for_ticks(&cfg.trajectory, steps.max(1));
    let mut rig = Rig::new(cfg, params, sim_seed, path[0])?;
    for _ in 0..cfg.collect.settle_ticks {
        rig.tick(&ControlInput::basic(), path[0])?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(walk_seed);
    let mut u = ControlInput::basic();
    let mut out = Vec::with_capacity(steps);
    for xy in path.iter().take(steps) {
        u = random_walk_targets(&u, sigma.theta, sigma.z, &mut rng);
        let position = rig.position(*xy);
        let frame = rig.frame;
        rig.tick(&u, *xy)?;
        out.push(Step { frame, position, input: u });
    }
    Ok(Episode { material: material.to_string(), trial, steps: out })
}

/// One PB update during recognition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PbUpdate {
    pub t: usize,
    pub p: ParametricBias,
}

/// Random motion on `material` with online PB updates from `p0`.
pub fn recognition_run(
    cfg: &ExperimentConfig,
    model: &TtnpbModel,
    material: &str,
    p0: ParametricBias,
    seed: u64,
) -> Result<Vec<PbUpdate>, HarnessError> {
    let rc = &cfg.recognize;
    let ep = random_walk_episode(cfg, material, 0, rc.sigma, rc.steps, derive_seed(seed, &[11]), derive_seed(seed, &[12]))?;
    let mut online = OnlinePb::new(p0, cfg.online);
    let mut updates = Vec::new();
    for (t, step) in ep.steps.iter().enumerate() {
        if let Some(p) = online.observe(model, *step)? {
            if !(p.0[0].is_finite() && p.0[1].is_finite()) {
                return Err(HarnessError::Numeric(format!("PB diverged at step {t}")));
            }
            updates.push(PbUpdate { t, p });
        }
    }
    Ok(updates)
}

/// One control-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTick {
    pub t: usize,
    pub u_opt: [f64; 3],
    pub position: [f64; 3],
    /// Mean normal force of the realized frame.
    pub fz_mean: f64,
    /// Sensed roll and pitch torque of the realized frame.
    pub tau: [f64; 2],
    pub e1: f64,
    pub e2: Option<f64>,
    pub e3: f64,
    /// Predicted loss of the chosen plan and of its initial guess.
    pub loss: Option<f64>,
    pub init_loss: Option<f64>,
    pub p: ParametricBias,
    /// The optimizer hit a non-finite loss and fell back to the initial plan.
    pub fallback: bool,
    /// Realized frame, flattened `[fx, fy, fz]` per taxel.
    #[serde(rename = "F")]
    pub frame: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ControlRun {
    pub ticks: Vec<ControlTick>,
    /// Averages over the ticks after warmup; `None` when none are left.
    pub metrics: Option<Metrics>,
    pub fallbacks: Vec<usize>,
}

/// PB used by the controller under `mode`.
pub fn mode_pb(mode: &PbMode, table: &PbTable, material: &str) -> Result<Option<ParametricBias>, HarnessError> {
    let look = |m: &str| {
        table
            .get(m)
            .copied()
            .ok_or_else(|| HarnessError::Data(format!("checkpoint has no PB for `{m}`")))
    };
    match mode {
        PbMode::Basic => Ok(None),
        PbMode::Correct => look(material).map(Some),
        PbMode::Wrong(m) => look(m).map(Some),
    }
}

/// Closed loop on the serpentine path: predictive choice of the targets,
/// inner proportional control and the simulated contact.
pub fn control_run(
    cfg: &ExperimentConfig,
    model: Option<&TtnpbModel>,
    p: Option<ParametricBias>,
    seed: u64,
) -> Result<ControlRun, HarnessError> {
    let cc = &cfg.control;
    let params = material_params(cfg, &cc.material)?;
    let path = path_for_ticks(&cfg.trajectory, cc.steps.max(1));
    let mut rig = Rig::new(cfg, params, derive_seed(seed, &[21]), path[0])?;
    let mut history: Vec<Step> = Vec::new();
    for _ in 0..cfg.collect.settle_ticks {
        let step = Step { frame: rig.frame, position: rig.position(path[0]), input: ControlInput::basic() };
        rig.tick(&ControlInput::basic(), path[0])?;
        history.push(step);
    }
    let mut loss = TaskLoss::new(cc.loss);
    loss.lambda = cc.lambda;
    let mut online = match (model, p) {
        (Some(_), Some(p0)) if cc.online_pb => Some(OnlinePb::new(p0, cfg.online)),
        _ => None,
    };
    let mut plan: Option<HorizonPlan> = None;
    let mut ticks = Vec::with_capacity(cc.steps);
    let mut fallbacks = Vec::new();
    let mut realized = Vec::with_capacity(cc.steps);
    for (t, xy) in path.iter().take(cc.steps).enumerate() {
        let frame = rig.frame;
        let position = rig.position(*xy);
        let p_now = online.as_ref().map(|o| o.p).or(p);
        let (u, l, l0, fallback) = match (model, p_now) {
            (Some(model), Some(p_now)) => {
                let ctx = &history[history.len().saturating_sub(cc.context)..];
                let state = model.warm_state(ctx, &p_now)?;
                match optimize_step(model, &frame, &position, &state, plan.as_ref(), &p_now, loss, &cfg.opt) {
                    Ok(out) => {
                        plan = Some(out.plan);
                        (out.first(), Some(out.loss), Some(out.init_loss), false)
                    }
                    Err(TaskError::NonFiniteLoss { init }) => {
                        fallbacks.push(t);
                        plan = Some(init);
                        (init.first(), None, None, true)
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            _ => (ControlInput::basic(), None, None, false),
        };
        let next = rig.tick(&u, *xy)?;
        let step = Step { frame, position, input: u };
        history.push(step);
        if let (Some(o), Some(m)) = (online.as_mut(), model) {
            o.observe(m, step)?;
        }
        let TickMetrics { e1, e2, e3 } = tick_metrics(&next);
        let (tr, tp) = sensed_torques(&next, &rig.layout);
        ticks.push(ControlTick {
            t,
            u_opt: u.to_array(),
            position,
            fz_mean: mean_normal(&next),
            tau: [tr, tp],
            e1,
            e2,
            e3,
            loss: l,
            init_loss: l0,
            p: p_now.unwrap_or_default(),
            fallback,
            frame: next.to_flat().to_vec(),
        });
        realized.push(next);
    }
    let metrics = realized.get(cc.warmup..).and_then(|h| eval_metrics(h).ok());
    Ok(ControlRun { ticks, metrics, fallbacks })
}

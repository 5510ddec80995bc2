//! Contact simulator for a compliant arm pressing a 4x6 three-axis tactile
//! array onto a parameterized surface.
//!
//! Coordinates: `x` is the travel axis (front), `y` points to the left of the
//! sensor, `z` points up out of the surface. The rightmost taxel column is the
//! one with the smallest `y`.
//!
//! Angle convention: a positive roll lowers the `+y` edge of the pad and a
//! positive pitch lowers the `-x` edge. With the torque observers in
//! [`crate::ctrl`] this makes a positive angle increment raise the matching
//! sensed torque, so the proportional loop is a negative feedback.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROWS: usize = 6;
pub const COLS: usize = 4;
pub const N_TAXELS: usize = ROWS * COLS;
/// Flattened frame width: three axes per taxel.
pub const FRAME_DIM: usize = 3 * N_TAXELS;

pub const SENSOR_LENGTH_MM: f64 = 51.5;
pub const SENSOR_WIDTH_MM: f64 = 31.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("commanded pose contains a non-finite value: {0:?}")]
    NonFiniteCommand(HandPose),
    #[error("time step must be positive, got {0}")]
    BadTimeStep(f64),
    #[error("invalid material `{name}`: {reason}")]
    InvalidMaterial { name: String, reason: String },
    #[error("material library: {0}")]
    Library(String),
}

/// Taxel centres in the sensor frame, in mm. Index `row * COLS + col`;
/// row 0 is the rear (min `x`), col 0 is the right side (min `y`).
#[derive(Debug, Clone, PartialEq)]
pub struct TaxelLayout {
    positions: [[f64; 2]; N_TAXELS],
}

impl TaxelLayout {
    pub fn positions(&self) -> &[[f64; 2]; N_TAXELS] {
        &self.positions
    }

    pub fn row_pitch(&self) -> f64 {
        SENSOR_LENGTH_MM / ROWS as f64
    }

    pub fn col_pitch(&self) -> f64 {
        SENSOR_WIDTH_MM / COLS as f64
    }

    /// Outer extent of the cell grid `(along x, along y)`: centre span plus
    /// one cell pitch.
    pub fn envelope(&self) -> (f64, f64) {
        let span = |axis: usize| {
            let lo = self.positions.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let hi = self.positions.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        (span(0) + self.row_pitch(), span(1) + self.col_pitch())
    }

    pub fn index(row: usize, col: usize) -> usize {
        row * COLS + col
    }

    /// The six taxels of the rightmost (min `y`) column.
    pub fn right_column(&self) -> [usize; ROWS] {
        std::array::from_fn(|row| Self::index(row, 0))
    }

    pub fn is_right(&self, i: usize) -> bool {
        i % COLS == 0
    }
}

pub fn taxel_layout() -> TaxelLayout {
    let row_pitch = SENSOR_LENGTH_MM / ROWS as f64;
    let col_pitch = SENSOR_WIDTH_MM / COLS as f64;
    let mut positions = [[0.0; 2]; N_TAXELS];
    for row in 0..ROWS {
        for col in 0..COLS {
            positions[TaxelLayout::index(row, col)] = [
                (row as f64 - (ROWS as f64 - 1.0) / 2.0) * row_pitch,
                (col as f64 - (COLS as f64 - 1.0) / 2.0) * col_pitch,
            ];
        }
    }
    TaxelLayout { positions }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub stiffness: f64,
    pub friction: f64,
    pub waviness_amp: f64,
    pub waviness_len: f64,
    pub rattle_gain: f64,
}

impl MaterialParams {
    pub fn validate(&self, name: &str) -> Result<(), SimError> {
        let bad = |reason: &str| {
            Err(SimError::InvalidMaterial { name: name.to_string(), reason: reason.to_string() })
        };
        let all_finite = [
            self.stiffness,
            self.friction,
            self.waviness_amp,
            self.waviness_len,
            self.rattle_gain,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite parameter");
        }
        if self.stiffness <= 0.0 {
            return bad("stiffness must be > 0");
        }
        if self.friction < 0.0 {
            return bad("friction must be >= 0");
        }
        if self.waviness_amp < 0.0 {
            return bad("waviness_amp must be >= 0");
        }
        if self.waviness_len <= 0.0 {
            return bad("waviness_len must be > 0");
        }
        if self.rattle_gain < 0.0 {
            return bad("rattle_gain must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    #[serde(flatten)]
    pub params: MaterialParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialLibrary {
    #[serde(rename = "material")]
    pub materials: Vec<Material>,
}

const DEFAULT_LIBRARY: &str = include_str!("../data/materials.toml");

impl MaterialLibrary {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let lib: MaterialLibrary =
            toml::from_str(text).map_err(|e| SimError::Library(e.to_string()))?;
        for (i, m) in lib.materials.iter().enumerate() {
            m.params.validate(&m.name)?;
            if lib.materials[..i].iter().any(|o| o.name == m.name) {
                return Err(SimError::Library(format!("duplicate material `{}`", m.name)));
            }
        }
        Ok(lib)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Library(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The built-in six-material bench (five training surfaces and one
    /// held-out stiffer variant of cardboard).
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_LIBRARY).expect("builtin material library is valid")
    }

    pub fn get(&self, name: &str) -> Option<&Material> {
        self.materials.iter().find(|m| m.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.materials.iter().map(|m| m.name.as_str())
    }
}

/// Hand pose: position in mm, angles in degrees. Yaw is held at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl HandPose {
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    fn is_finite(&self) -> bool {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One tactile reading: `(f_x, f_y, f_z)` per taxel, dimensionless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorFrame {
    pub f: [[f64; 3]; N_TAXELS],
}

impl Default for SensorFrame {
    fn default() -> Self {
        Self::zeros()
    }
}

impl SensorFrame {
    pub fn zeros() -> Self {
        Self { f: [[0.0; 3]; N_TAXELS] }
    }

    pub fn fz(&self, i: usize) -> f64 {
        self.f[i][2]
    }

    pub fn axis(&self, axis: usize) -> [f64; N_TAXELS] {
        std::array::from_fn(|i| self.f[i][axis])
    }

    /// Interleaved `[fx0, fy0, fz0, fx1, ...]`.
    pub fn to_flat(&self) -> [f64; FRAME_DIM] {
        std::array::from_fn(|k| self.f[k / 3][k % 3])
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len(), FRAME_DIM, "flat frame must have {FRAME_DIM} entries");
        let mut f = [[0.0; 3]; N_TAXELS];
        for (k, v) in flat.iter().enumerate() {
            f[k / 3][k % 3] = *v;
        }
        Self { f }
    }

    pub fn is_zero(&self) -> bool {
        self.f.iter().flatten().all(|v| *v == 0.0)
    }
}

/// Subtracts a bias frame captured out of contact, then floors `f_z` at 0.
pub fn remove_offsets(frame: &SensorFrame, bias: &SensorFrame) -> SensorFrame {
    let mut out = *frame;
    for (o, b) in out.f.iter_mut().zip(bias.f.iter()) {
        for axis in 0..3 {
            o[axis] -= b[axis];
        }
        o[2] = o[2].max(0.0);
    }
    out
}

pub fn surface_height(material: &MaterialParams, x: f64, y: f64) -> f64 {
    if material.waviness_amp == 0.0 {
        return 0.0;
    }
    let k = 2.0 * PI / material.waviness_len;
    material.waviness_amp * (k * x).sin() * (k * y).sin()
}

/// Free parameters of the compliant arm and sensor skin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// First-order lag time constant on the pose, s.
    pub lag_tau: f64,
    /// Normal deflection, mm per force unit of summed `f_z`.
    pub deflect_per_force: f64,
    /// Angular deflection, deg per torque unit.
    pub deflect_per_torque: f64,
    /// Distance from the compliant wrist to the pad, mm.
    pub lever_mm: f64,
    /// Tangential skin stiffness, force units per mm.
    pub tangential_stiffness: f64,
    /// Rattle std at zero load, mm.
    pub rattle_base_mm: f64,
    /// Additional rattle std per 100 force units of mean load, mm.
    pub rattle_per_100: f64,
    /// Maximum internal integration step, s.
    pub max_substep: f64,
    /// Half-width of the uniform per-channel sensor offset drawn at start.
    pub offset_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lag_tau: 0.15,
            deflect_per_force: 0.002,
            deflect_per_torque: 0.0005,
            lever_mm: 60.0,
            tangential_stiffness: 50.0,
            rattle_base_mm: 0.05,
            rattle_per_100: 0.02,
            max_substep: 0.02,
            offset_scale: 0.0,
        }
    }
}

impl SimConfig {
    /// A stiff, noiseless arm: realized pose equals the lagged command.
    pub fn rigid() -> Self {
        Self { deflect_per_force: 0.0, deflect_per_torque: 0.0, rattle_base_mm: 0.0, rattle_per_100: 0.0, ..Self::default() }
    }
}

/// Normal taxel forces for a pad at `pose`, with the arm's normal deflection
/// solved for equilibrium. Returns the forces and the realized pad height.
pub fn contact_normals(
    layout: &TaxelLayout,
    material: &MaterialParams,
    pose: &HandPose,
    deflect_per_force: f64,
) -> ([f64; N_TAXELS], f64) {
    let (sr, sp) = (pose.roll.to_radians().sin(), pose.pitch.to_radians().sin());
    // height of the pad centre at which taxel i just touches the surface
    let touch: [f64; N_TAXELS] = std::array::from_fn(|i| {
        let [px, py] = layout.positions[i];
        surface_height(material, pose.x + px, pose.y + py) - (-py * sr + px * sp)
    });
    let z = solve_deflected_height(&touch, pose.z, deflect_per_force * material.stiffness);
    let forces = std::array::from_fn(|i| material.stiffness * (touch[i] - z).max(0.0));
    (forces, z)
}

/// Root of `z - z0 = c * sum_i max(0, b_i - z)`, exact for the piecewise
/// linear right-hand side.
fn solve_deflected_height(breaks: &[f64; N_TAXELS], z0: f64, c: f64) -> f64 {
    let mut sorted = *breaks;
    sorted.sort_by(|a, b| b.total_cmp(a));
    if c == 0.0 || z0 >= sorted[0] {
        return z0;
    }
    let mut sum = 0.0;
    for (n, b) in sorted.iter().enumerate() {
        sum += b;
        let active = (n + 1) as f64;
        let z = (z0 + c * sum) / (1.0 + c * active);
        let next = sorted.get(n + 1).copied().unwrap_or(f64::NEG_INFINITY);
        if z >= next {
            return z;
        }
    }
    unreachable!("the active set always closes at the lowest breakpoint")
}

/// Simulator state. Stepping is deterministic given the seed and the command
/// stream.
#[derive(Debug, Clone)]
pub struct SimState {
    pub layout: TaxelLayout,
    pub config: SimConfig,
    /// Pose after lag, deflection and rattle at the end of the last step.
    pub realized_pose: HandPose,
    lagged: HandPose,
    /// Stick anchors of each in-contact taxel in world xy, mm.
    pub contact_memory: [Option<[f64; 2]>; N_TAXELS],
    shear_sum: [f64; 2],
    torques: [f64; 2],
    mean_load: f64,
    offsets: SensorFrame,
    rng: ChaCha8Rng,
}

impl SimState {
    pub fn new(seed: u64, start: HandPose, config: SimConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offsets = SensorFrame::zeros();
        if config.offset_scale > 0.0 {
            let u = Uniform::new_inclusive(-config.offset_scale, config.offset_scale);
            for v in offsets.f.iter_mut().flatten() {
                *v = u.sample(&mut rng);
            }
        }
        let start = HandPose { yaw: 0.0, ..start };
        Self {
            layout: taxel_layout(),
            config,
            realized_pose: start,
            lagged: start,
            contact_memory: [None; N_TAXELS],
            shear_sum: [0.0; 2],
            torques: [0.0; 2],
            mean_load: 0.0,
            offsets,
            rng,
        }
    }

    /// Advances the arm by `dt` seconds toward `commanded` and returns the raw
    /// sensor frame (sensor offsets included, if configured).
    pub fn step(
        &mut self,
        material: &MaterialParams,
        commanded: &HandPose,
        dt: f64,
    ) -> Result<SensorFrame, SimError> {
        if !commanded.is_finite() {
            return Err(SimError::NonFiniteCommand(*commanded));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SimError::BadTimeStep(dt));
        }
        let cfg = self.config;
        let rattle_std = material.rattle_gain
            * (cfg.rattle_base_mm + cfg.rattle_per_100 * self.mean_load / 100.0);
        let noise: [f64; 3] = match Normal::new(0.0, rattle_std) {
            Ok(n) if rattle_std > 0.0 => std::array::from_fn(|_| n.sample(&mut self.rng)),
            _ => [0.0; 3],
        };

        let substeps = (dt / cfg.max_substep).ceil().max(1.0) as usize;
        let h = dt / substeps as f64;
        let alpha = 1.0 - (-h / cfg.lag_tau).exp();
        let mut frame = SensorFrame::zeros();
        for _ in 0..substeps {
            let l = &mut self.lagged;
            l.x += (commanded.x - l.x) * alpha;
            l.y += (commanded.y - l.y) * alpha;
            l.z += (commanded.z - l.z) * alpha;
            l.roll += (commanded.roll - l.roll) * alpha;
            l.pitch += (commanded.pitch - l.pitch) * alpha;

            let g = cfg.deflect_per_torque;
            let shear_moment = |s: f64| cfg.lever_mm * s / 100.0;
            let pose = HandPose {
                x: l.x + noise[0],
                y: l.y + noise[1],
                z: l.z + noise[2],
                roll: l.roll - g * self.torques[0] - g * shear_moment(self.shear_sum[1]),
                pitch: l.pitch - g * self.torques[1] + g * shear_moment(self.shear_sum[0]),
                yaw: 0.0,
            };
            let (normals, z) =
                contact_normals(&self.layout, material, &pose, cfg.deflect_per_force);
            self.realized_pose = HandPose { z, ..pose };
            frame = self.tangential(material, &normals);
            self.record_wrench(&frame);
        }

        for (f, o) in frame.f.iter_mut().zip(self.offsets.f.iter()) {
            for axis in 0..3 {
                f[axis] += o[axis];
            }
        }
        Ok(frame)
    }

    /// Anchor-spring stick-slip on every taxel, clipped to the friction cone.
    fn tangential(&mut self, material: &MaterialParams, normals: &[f64; N_TAXELS]) -> SensorFrame {
        let kt = self.config.tangential_stiffness;
        let pose = self.realized_pose;
        let mut frame = SensorFrame::zeros();
        for i in 0..N_TAXELS {
            let fz = normals[i];
            if fz <= 0.0 {
                self.contact_memory[i] = None;
                continue;
            }
            let [px, py] = self.layout.positions[i];
            let p = [pose.x + px, pose.y + py];
            let anchor = self.contact_memory[i].get_or_insert(p);
            let d = [p[0] - anchor[0], p[1] - anchor[1]];
            let stretch = d[0].hypot(d[1]);
            let cap = material.friction * fz;
            let (fx, fy) = if kt * stretch > cap {
                let dir = [d[0] / stretch, d[1] / stretch];
                *anchor = [p[0] - dir[0] * cap / kt, p[1] - dir[1] * cap / kt];
                (-cap * dir[0], -cap * dir[1])
            } else {
                (-kt * d[0], -kt * d[1])
            };
            frame.f[i] = [fx, fy, fz];
        }
        frame
    }

    fn record_wrench(&mut self, frame: &SensorFrame) {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut roll = 0.0;
        let mut pitch = 0.0;
        let mut load = 0.0;
        for (f, [px, py]) in frame.f.iter().zip(self.layout.positions.iter()) {
            sx += f[0];
            sy += f[1];
            roll += py * f[2];
            pitch += -px * f[2];
            load += f[2];
        }
        self.shear_sum = [sx, sy];
        self.torques = [roll / 100.0, pitch / 100.0];
        self.mean_load = load / N_TAXELS as f64;
    }
}

/// Functional form of [`SimState::step`].
pub fn sim_step(
    state: &SimState,
    material: &MaterialParams,
    commanded: &HandPose,
    dt: f64,
) -> Result<(SimState, SensorFrame), SimError> {
    let mut next = state.clone();
    let frame = next.step(material, commanded, dt)?;
    Ok((next, frame))
}

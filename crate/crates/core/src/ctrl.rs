//! Inner proportional contact controller, taxel torque/force observers and
//! the target random walk used for data collection.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::sim::{HandPose, SensorFrame, TaxelLayout, N_TAXELS};

pub const TAU_MIN: f64 = -50.0;
pub const TAU_MAX: f64 = 50.0;
pub const F_MIN: f64 = 50.0;
pub const F_MAX: f64 = 300.0;
/// Control tick, s (5 Hz).
pub const DT: f64 = 0.2;

/// Raw moments (force unit x mm) are divided by this to give torque units.
pub const TORQUE_UNIT: f64 = 100.0;

/// `u = {tau_roll_ref, tau_pitch_ref, f_z_ref}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub tau_roll_ref: f64,
    pub tau_pitch_ref: f64,
    pub f_z_ref: f64,
}

impl Default for ControlInput {
    fn default() -> Self {
        Self::basic()
    }
}

impl ControlInput {
    /// Constant input of the baseline controller.
    pub const fn basic() -> Self {
        Self { tau_roll_ref: 0.0, tau_pitch_ref: 0.0, f_z_ref: 200.0 }
    }

    pub fn clamped(self) -> Self {
        Self {
            tau_roll_ref: self.tau_roll_ref.clamp(TAU_MIN, TAU_MAX),
            tau_pitch_ref: self.tau_pitch_ref.clamp(TAU_MIN, TAU_MAX),
            f_z_ref: self.f_z_ref.clamp(F_MIN, F_MAX),
        }
    }

    pub fn in_bounds(&self) -> bool {
        (TAU_MIN..=TAU_MAX).contains(&self.tau_roll_ref)
            && (TAU_MIN..=TAU_MAX).contains(&self.tau_pitch_ref)
            && (F_MIN..=F_MAX).contains(&self.f_z_ref)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.tau_roll_ref, self.tau_pitch_ref, self.f_z_ref]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { tau_roll_ref: a[0], tau_pitch_ref: a[1], f_z_ref: a[2] }
    }
}

/// Proportional gains and clamps; angles in deg, positions in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Gains {
    pub k_theta: f64,
    pub k_z: f64,
    pub d_theta_max: f64,
    pub theta_max: f64,
    pub d_z_max: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Self { k_theta: 0.01, k_z: 0.03, d_theta_max: 3.0, theta_max: 5.0, d_z_max: 5.0 }
    }
}

/// Controller references. `x_z_ref` is the pressing coordinate: it grows
/// toward the surface, so the commanded hand height is `-x_z_ref`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CtrlState {
    pub theta_roll_ref: f64,
    pub theta_pitch_ref: f64,
    pub x_z_ref: f64,
}

/// Increments applied by one proportional step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PoseDelta {
    pub d_roll: f64,
    pub d_pitch: f64,
    pub d_z: f64,
}

impl CtrlState {
    /// Starts hovering `height` mm above the nominal surface.
    pub fn hovering(height: f64) -> Self {
        Self { theta_roll_ref: 0.0, theta_pitch_ref: 0.0, x_z_ref: -height }
    }

    pub fn commanded_pose(&self, x: f64, y: f64) -> HandPose {
        HandPose {
            x,
            y,
            z: -self.x_z_ref,
            roll: self.theta_roll_ref,
            pitch: self.theta_pitch_ref,
            yaw: 0.0,
        }
    }
}

/// Moments of the normal forces about the sensor centre, force unit x mm.
pub fn raw_moments(frame: &SensorFrame, layout: &TaxelLayout) -> (f64, f64) {
    // taxel i and N-1-i are point mirrors, so pairing them makes a
    // symmetric load cancel exactly
    let pos = layout.positions();
    let mut roll = 0.0;
    let mut pitch = 0.0;
    for i in 0..N_TAXELS / 2 {
        let j = N_TAXELS - 1 - i;
        let diff = frame.f[i][2] - frame.f[j][2];
        roll += pos[i][1] * diff;
        pitch += -pos[i][0] * diff;
    }
    (roll, pitch)
}

/// `(tau_roll, tau_pitch)` in torque units. Positive roll torque means the
/// left (`+y`) side is loaded; positive pitch torque means the rear is.
pub fn sensed_torques(frame: &SensorFrame, layout: &TaxelLayout) -> (f64, f64) {
    let (roll, pitch) = raw_moments(frame, layout);
    (roll / TORQUE_UNIT, pitch / TORQUE_UNIT)
}

pub fn mean_normal(frame: &SensorFrame) -> f64 {
    frame.f.iter().map(|f| f[2]).sum::<f64>() / N_TAXELS as f64
}

pub fn proportional_step(
    state: &CtrlState,
    u: &ControlInput,
    frame: &SensorFrame,
    layout: &TaxelLayout,
    gains: &Gains,
) -> (CtrlState, PoseDelta) {
    let (tau_roll, tau_pitch) = sensed_torques(frame, layout);
    let f_ave = mean_normal(frame);
    let dth = gains.d_theta_max;
    let delta = PoseDelta {
        d_roll: (gains.k_theta * (u.tau_roll_ref - tau_roll)).clamp(-dth, dth),
        d_pitch: (gains.k_theta * (u.tau_pitch_ref - tau_pitch)).clamp(-dth, dth),
        d_z: (gains.k_z * (u.f_z_ref - f_ave)).clamp(-gains.d_z_max, gains.d_z_max),
    };
    let th = gains.theta_max;
    let next = CtrlState {
        theta_roll_ref: (state.theta_roll_ref + delta.d_roll).clamp(-th, th),
        theta_pitch_ref: (state.theta_pitch_ref + delta.d_pitch).clamp(-th, th),
        x_z_ref: state.x_z_ref + delta.d_z,
    };
    (next, delta)
}

/// One step of the clamped Gaussian walk on the control targets. `sigma_*`
/// are variances of the per-step noise; zero leaves that component untouched.
pub fn random_walk_targets<R: Rng + ?Sized>(
    u: &ControlInput,
    sigma_theta: f64,
    sigma_z: f64,
    rng: &mut R,
) -> ControlInput {
    let mut draw = |var: f64| match Normal::new(0.0, var.sqrt()) {
        Ok(n) if var > 0.0 => n.sample(rng),
        _ => 0.0,
    };
    let d_roll = draw(sigma_theta);
    let d_pitch = draw(sigma_theta);
    let d_z = draw(sigma_z);
    ControlInput {
        tau_roll_ref: u.tau_roll_ref + d_roll,
        tau_pitch_ref: u.tau_pitch_ref + d_pitch,
        f_z_ref: u.f_z_ref + d_z,
    }
    .clamped()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{taxel_layout, TaxelLayout, COLS, ROWS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(fz: f64) -> SensorFrame {
        let mut f = SensorFrame::zeros();
        for t in f.f.iter_mut() {
            t[2] = fz;
        }
        f
    }

    #[test]
    fn torques_of_uniform_and_empty_frames_vanish() {
        let layout = taxel_layout();
        let (r, p) = sensed_torques(&uniform(173.0), &layout);
        assert!(r.abs() < 1e-9 && p.abs() < 1e-9);
        assert_eq!(sensed_torques(&SensorFrame::zeros(), &layout), (0.0, 0.0));
    }

    #[test]
    fn right_column_load_gives_negative_roll() {
        let layout = taxel_layout();
        let mut frame = SensorFrame::zeros();
        for i in layout.right_column() {
            frame.f[i][2] = 100.0;
        }
        // six taxels at y = -11.625 mm
        let (raw, _) = raw_moments(&frame, &layout);
        assert!((raw + 6975.0).abs() < 1e-9);
        let (tau, pitch) = sensed_torques(&frame, &layout);
        assert!((tau + 69.75).abs() < 1e-9);
        assert!(pitch.abs() < 1e-9);
    }

    #[test]
    fn mean_normal_examples() {
        assert_eq!(mean_normal(&uniform(200.0)), 200.0);
        assert_eq!(mean_normal(&SensorFrame::zeros()), 0.0);
        let mut half = uniform(100.0);
        for t in half.f.iter_mut().take(12) {
            t[2] = 300.0;
        }
        assert_eq!(mean_normal(&half), 200.0);
    }

    #[test]
    fn zero_error_keeps_state() {
        let layout = taxel_layout();
        let s = CtrlState { theta_roll_ref: 1.5, theta_pitch_ref: -0.5, x_z_ref: 7.0 };
        let u = ControlInput::basic();
        let (next, delta) = proportional_step(&s, &u, &uniform(200.0), &layout, &Gains::default());
        assert_eq!(next, s);
        assert_eq!(delta, PoseDelta::default());
    }

    #[test]
    fn angle_step_clamps_at_three_degrees() {
        let layout = taxel_layout();
        let s = CtrlState::default();
        // tau_ref - tau = 500 -> 0.01 * 500 = 5 deg, clamped to 3
        let u = ControlInput { tau_roll_ref: 500.0, tau_pitch_ref: -500.0, f_z_ref: 200.0 };
        let (next, delta) = proportional_step(&s, &u, &uniform(200.0), &layout, &Gains::default());
        assert_eq!(delta.d_roll, 3.0);
        assert_eq!(delta.d_pitch, -3.0);
        assert_eq!(next.theta_roll_ref, 3.0);
    }

    #[test]
    fn angle_reference_saturates_at_five_degrees() {
        let layout = taxel_layout();
        let s = CtrlState { theta_roll_ref: 4.5, theta_pitch_ref: -4.5, x_z_ref: 0.0 };
        let u = ControlInput { tau_roll_ref: 300.0, tau_pitch_ref: -300.0, f_z_ref: 200.0 };
        let (next, _) = proportional_step(&s, &u, &uniform(200.0), &layout, &Gains::default());
        assert_eq!(next.theta_roll_ref, 5.0);
        assert_eq!(next.theta_pitch_ref, -5.0);
    }

    #[test]
    fn depth_step_clamps_but_reference_does_not() {
        let layout = taxel_layout();
        let s = CtrlState { x_z_ref: 40.0, ..Default::default() };
        let u = ControlInput { f_z_ref: 300.0, ..ControlInput::basic() };
        // 0.03 * 300 = 9 mm -> 5 mm
        let (next, delta) = proportional_step(&s, &u, &SensorFrame::zeros(), &layout, &Gains::default());
        assert_eq!(delta.d_z, 5.0);
        assert_eq!(next.x_z_ref, 45.0);
        // 0.03 * (200 - 190) = 0.3 mm, inside the clamp
        let (_, small) = proportional_step(&s, &ControlInput::basic(), &uniform(190.0), &layout, &Gains::default());
        assert!((small.d_z - 0.3).abs() < 1e-12);
    }

    #[test]
    fn right_load_drives_roll_negative_only_if_asked() {
        let layout = taxel_layout();
        let mut frame = uniform(150.0);
        for row in 0..ROWS {
            frame.f[TaxelLayout::index(row, COLS - 1)][2] = 250.0;
        }
        let (next, _) =
            proportional_step(&CtrlState::default(), &ControlInput::basic(), &frame, &layout, &Gains::default());
        // left side overloaded -> lower the right side, i.e. negative roll
        assert!(next.theta_roll_ref < 0.0);
    }

    #[test]
    fn walk_with_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = ControlInput { tau_roll_ref: 12.0, tau_pitch_ref: -3.0, f_z_ref: 180.0 };
        assert_eq!(random_walk_targets(&u, 0.0, 0.0, &mut rng), u);
    }

    #[test]
    fn walk_clamps_to_bounds() {
        let u = ControlInput { tau_roll_ref: 0.0, tau_pitch_ref: 0.0, f_z_ref: 295.0 };
        // +20 on f: 315 -> 300
        let pushed = ControlInput { f_z_ref: u.f_z_ref + 20.0, ..u }.clamped();
        assert_eq!(pushed.f_z_ref, 300.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cur = ControlInput::basic();
        for _ in 0..10_000 {
            cur = random_walk_targets(&cur, 10.0, 30.0, &mut rng);
            assert!(cur.in_bounds());
        }
    }

    #[test]
    fn walk_sigma_is_a_variance() {
        // far from the bounds, so no clamping: increments have std sqrt(sigma)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let (mut s_roll, mut s_z) = (0.0, 0.0);
        for _ in 0..n {
            let next = random_walk_targets(&ControlInput::basic(), 9.0, 25.0, &mut rng);
            s_roll += next.tau_roll_ref.powi(2);
            s_z += (next.f_z_ref - 200.0).powi(2);
        }
        let (sd_roll, sd_z) = ((s_roll / n as f64).sqrt(), (s_z / n as f64).sqrt());
        assert!((sd_roll - 3.0).abs() < 0.1, "{sd_roll}");
        assert!((sd_z - 5.0).abs() < 0.15, "{sd_z}");
    }

    #[test]
    fn commanded_pose_maps_pressing_depth_down() {
        let s = CtrlState { theta_roll_ref: 1.0, theta_pitch_ref: 2.0, x_z_ref: 3.0 };
        let p = s.commanded_pose(10.0, 20.0);
        assert_eq!((p.x, p.y, p.z, p.roll, p.pitch, p.yaw), (10.0, 20.0, -3.0, 1.0, 2.0, 0.0));
        assert_eq!(CtrlState::hovering(2.0).commanded_pose(0.0, 0.0).z, 2.0);
    }
}

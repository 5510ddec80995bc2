//! wasm-bindgen entry points for the static demo page in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use tactile_wipe::ctrl::{random_walk_targets, sensed_torques, ControlInput};
use tactile_wipe::harness::{gen_trajectory, path_for_ticks, ExperimentConfig, Rig, TrajectoryConfig};
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use tactile_wipe::sim::MaterialLibrary;
use tactile_wipe::taskctl::{eval_metrics, tick_metrics};

fn material(name: &str) -> Result<tactile_wipe::sim::MaterialParams, String> {
    MaterialLibrary::builtin()
        .get(name)
        .map(|m| m.params)
        .ok_or_else(|| format!("unknown material `{name}`"))
}

/// Names of the built-in materials, comma separated.
#[wasm_bindgen]
pub fn materials() -> String {
    MaterialLibrary::builtin().names().collect::<Vec<_>>().join(",")
}

#[derive(Serialize)]
struct Press {
    /// `[fx, fy, fz]` per taxel after settling.
    frame: Vec<f64>,
    tau: [f64; 2],
    fz_mean: f64,
    e1: f64,
    e3: f64,
}

/// Presses the pad on `material` with fixed targets for `ticks` control
/// ticks and returns the final frame as JSON.
pub fn press_json(material_name: &str, tau_roll: f64, tau_pitch: f64, f_z: f64, ticks: usize, seed: u64) -> Result<String, String> {
    let params = material(material_name)?;
    let cfg = ExperimentConfig::default();
    let u = ControlInput { tau_roll_ref: tau_roll, tau_pitch_ref: tau_pitch, f_z_ref: f_z }.clamped();
    let xy = [60.0, 30.0];
    let mut rig = Rig::new(&cfg, params, seed, xy).map_err(|e| e.to_string())?;
    for _ in 0..ticks {
        rig.tick(&u, xy).map_err(|e| e.to_string())?;
    }
    let m = tick_metrics(&rig.frame);
    let out = Press {
        frame: rig.frame.to_flat().to_vec(),
        tau: sensed_torques(&rig.frame, &rig.layout).into(),
        fz_mean: tactile_wipe::ctrl::mean_normal(&rig.frame),
        e1: m.e1,
        e3: m.e3,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn press(material: &str, tau_roll: f64, tau_pitch: f64, f_z: f64, ticks: usize, seed: u64) -> Result<String, JsError> {
    press_json(material, tau_roll, tau_pitch, f_z, ticks, seed).map_err(|e| JsError::new(&e))
}

/// Serpentine path as a flat `[x0, y0, x1, y1, ...]` array.
#[wasm_bindgen]
pub fn path(stroke_mm: f64, pitch_mm: f64, speed_mm_s: f64, lanes: usize, strokes: usize) -> Vec<f64> {
    let cfg = TrajectoryConfig { stroke_mm, pitch_mm, speed_mm_s, lanes: lanes.max(1) };
    if !(stroke_mm > 0.0 && pitch_mm > 0.0 && speed_mm_s > 0.0) {
        return Vec::new();
    }
    gen_trajectory(&cfg, strokes).into_iter().flatten().collect()
}

#[derive(Serialize)]
struct Wipe {
    x: Vec<f64>,
    y: Vec<f64>,
    fz_mean: Vec<f64>,
    tau_roll: Vec<f64>,
    fz_ref: Vec<f64>,
    e1: f64,
    e2: f64,
    e3: f64,
}

/// Wipes `steps` ticks along the default path with a random walk of the
/// given spread on the targets (zero spread is the basic controller).
pub fn wipe_json(material_name: &str, steps: usize, sigma_theta: f64, sigma_z: f64, seed: u64) -> Result<String, String> {
    let params = material(material_name)?;
    let cfg = ExperimentConfig::default();
    let route = path_for_ticks(&cfg.trajectory, steps.max(1));
    let mut rig = Rig::new(&cfg, params, seed, route[0]).map_err(|e| e.to_string())?;
    for _ in 0..cfg.collect.settle_ticks {
        rig.tick(&ControlInput::basic(), route[0]).map_err(|e| e.to_string())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut u = ControlInput::basic();
    let mut out = Wipe { x: vec![], y: vec![], fz_mean: vec![], tau_roll: vec![], fz_ref: vec![], e1: 0.0, e2: 0.0, e3: 0.0 };
    let mut frames = Vec::with_capacity(steps);
    for xy in route.iter().take(steps) {
        u = random_walk_targets(&u, sigma_theta.max(0.0), sigma_z.max(0.0), &mut rng);
        let f = rig.tick(&u, *xy).map_err(|e| e.to_string())?;
        out.x.push(xy[0]);
        out.y.push(xy[1]);
        out.fz_mean.push(tactile_wipe::ctrl::mean_normal(&f));
        out.tau_roll.push(sensed_torques(&f, &rig.layout).0);
        out.fz_ref.push(u.f_z_ref);
        frames.push(f);
    }
    if let Ok(m) = eval_metrics(&frames) {
        out.e1 = m.e1;
        out.e2 = m.e2;
        out.e3 = m.e3;
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn wipe(material: &str, steps: usize, sigma_theta: f64, sigma_z: f64, seed: u64) -> Result<String, JsError> {
    wipe_json(material, steps, sigma_theta, sigma_z, seed).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn press_returns_a_full_frame() {
        let v: serde_json::Value = serde_json::from_str(&press_json("foam", 0.0, 0.0, 200.0, 30, 1).unwrap()).unwrap();
        assert_eq!(v["frame"].as_array().unwrap().len(), 72);
        assert!((v["fz_mean"].as_f64().unwrap() - 200.0).abs() < 20.0);
        assert!(press_json("velvet", 0.0, 0.0, 200.0, 3, 1).is_err());
    }

    #[test]
    fn path_is_flat_pairs() {
        let p = path(120.0, 20.0, 30.0, 4, 2);
        assert_eq!(p.len() % 2, 0);
        assert_eq!(&p[..2], &[0.0, 0.0]);
        assert!(path(0.0, 20.0, 30.0, 4, 2).is_empty());
    }

    #[test]
    fn wipe_reports_metrics() {
        let v: serde_json::Value = serde_json::from_str(&wipe_json("desk", 50, 0.0, 0.0, 3).unwrap()).unwrap();
        assert_eq!(v["x"].as_array().unwrap().len(), 50);
        assert!(v["e1"].as_f64().unwrap() > 0.0);
        assert!(v["fz_ref"].as_array().unwrap().iter().all(|f| f.as_f64() == Some(200.0)));
    }

    #[test]
    fn materials_lists_builtin() {
        assert!(materials().split(',').any(|m| m == "thin_cardboard"));
    }
}

use super::config::TrajectoryConfig;
use crate::ctrl::DT;

/// Corner points of a serpentine path made of `strokes` strokes along x,
/// each followed by a lateral shift of one pitch. The shift direction turns
/// back after `lanes - 1` shifts.
fn corners(cfg: &TrajectoryConfig, strokes: usize) -> Vec<[f64; 2]> {
    let mut pts = vec![[0.0, 0.0]];
    let (mut x, mut y) = (0.0, 0.0);
    let mut lane = 0usize;
    let mut up = true;
    for _ in 0..strokes {
        x = if x == 0.0 { cfg.stroke_mm } else { 0.0 };
        pts.push([x, y]);
        if cfg.lanes > 1 {
            if up && lane + 1 == cfg.lanes {
                up = false;
            } else if !up && lane == 0 {
                up = true;
            }
            if up {
                lane += 1;
            } else {
                lane -= 1;
            }
        }
        y = lane as f64 * cfg.pitch_mm;
        pts.push([x, y]);
    }
    pts
}

/// Hand xy commands at the control rate along the serpentine path: one point
/// per `speed * DT` of arc length, the final corner included. Zero strokes
/// give an empty sequence.
pub fn gen_trajectory(cfg: &TrajectoryConfig, strokes: usize) -> Vec<[f64; 2]> {
    if strokes == 0 {
        return Vec::new();
    }
    let ds = cfg.speed_mm_s * DT;
    let c = corners(cfg, strokes);
    let mut out = vec![c[0]];
    // arc length travelled since the last sample
    let mut since = 0.0;
    for seg in c.windows(2) {
        let [a, b] = [seg[0], seg[1]];
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let mut s = ds - since;
        while s <= len + 1e-9 {
            let f = s / len;
            out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
            s += ds;
        }
        since = len - (s - ds);
    }
    let end = *c.last().expect("corners nonempty");
    let last = *out.last().expect("nonempty");
    if (last[0] - end[0]).hypot(last[1] - end[1]) > 1e-9 {
        out.push(end);
    }
    out
}

/// At least `ticks` points of the path, truncated.
pub fn path_for_ticks(cfg: &TrajectoryConfig, ticks: usize) -> Vec<[f64; 2]> {
    if ticks == 0 {
        return Vec::new();
    }
    let per_stroke = (cfg.stroke_mm + cfg.pitch_mm) / (cfg.speed_mm_s * DT);
    let mut strokes = (ticks as f64 / per_stroke).ceil() as usize + 1;
    loop {
        let mut path = gen_trajectory(cfg, strokes);
        if path.len() >= ticks {
            path.truncate(ticks);
            return path;
        }
        strokes *= 2;
    }
}

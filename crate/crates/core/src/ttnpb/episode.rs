//! Episode files: one JSON record per line, one step per record.
//!
//! `{"t":0,"material_id":"foam","trial_id":1,"F":[72 values],"x":[3],"u":[3]}`
//!
//! Floats are written in shortest round-trip form, so a write/read cycle is
//! bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Episode, Step, TtnpbError};
use crate::ctrl::ControlInput;
use crate::sim::{SensorFrame, FRAME_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub t: usize,
    pub material_id: String,
    pub trial_id: u32,
    #[serde(rename = "F")]
    pub f: Vec<f64>,
    pub x: [f64; 3],
    pub u: [f64; 3],
}

pub fn write_episode<W: Write>(episode: &Episode, out: &mut W) -> std::io::Result<()> {
    for (t, s) in episode.steps.iter().enumerate() {
        let rec = EpisodeRecord {
            t,
            material_id: episode.material.clone(),
            trial_id: episode.trial,
            f: s.frame.to_flat().to_vec(),
            x: s.position,
            u: s.input.to_array(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode, TtnpbError> {
    let file = path.display().to_string();
    let err = |line: usize, message: String| TtnpbError::Parse { file: file.clone(), line, message };
    let reader = BufReader::new(fs::File::open(path)?);
    let mut episode: Option<Episode> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord =
            serde_json::from_str(&line).map_err(|e| err(line_no, e.to_string()))?;
        if rec.f.len() != FRAME_DIM {
            return Err(err(line_no, format!("F has {} values, expected {FRAME_DIM}", rec.f.len())));
        }
        if rec.f.iter().chain(&rec.x).chain(&rec.u).any(|v| !v.is_finite()) {
            return Err(err(line_no, "non-finite value".into()));
        }
        let ep = episode.get_or_insert_with(|| Episode {
            material: rec.material_id.clone(),
            trial: rec.trial_id,
            steps: Vec::new(),
        });
        if rec.material_id != ep.material || rec.trial_id != ep.trial {
            return Err(err(line_no, "record belongs to a different material or trial".into()));
        }
        if rec.t != ep.steps.len() {
            return Err(err(line_no, format!("expected t = {}, found {}", ep.steps.len(), rec.t)));
        }
        ep.steps.push(Step {
            frame: SensorFrame::from_flat(&rec.f),
            position: rec.x,
            input: ControlInput::from_array(rec.u),
        });
    }
    match episode {
        Some(ep) if ep.steps.len() >= 2 => Ok(ep),
        _ => Err(err(0, "episode needs at least two steps".into())),
    }
}

/// Every `*.jsonl` file in `dir`, in file-name order.
pub fn read_episode_dir(dir: &Path) -> Result<Vec<Episode>, TtnpbError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_episode(p)).collect()
}

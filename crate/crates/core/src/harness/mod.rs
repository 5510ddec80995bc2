//! Experiment orchestration: data collection, training, online recognition,
//! the control comparison and the files they exchange.

mod config;
mod run;
mod trajectory;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcore::NetError;
use crate::sim::SimError;
use crate::taskctl::{eval_metrics, Metrics, TaskError};
use crate::ttnpb::{
    fit_pb, pb_pca, read_episode_dir, train, write_episode, Checkpoint, Episode, ParametricBias, Pca, PbTable,
    TtnpbError,
};

pub use config::{
    CollectConfig, ControlConfig, ExperimentConfig, PbMode, RecognizeConfig, SigmaSetting, TrajectoryConfig,
};
pub use run::{
    control_run, derive_seed, mode_pb, random_walk_episode, recognition_run, ControlRun, ControlTick, PbUpdate, Rig,
    WIPE_PLANE_Z,
};
pub use trajectory::{gen_trajectory, path_for_ticks};

/// Bumped whenever a CSV column set changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const PB_TABLE_HEADER: &[&str] = &["material", "p1", "p2"];
pub const LOSS_CURVE_HEADER: &[&str] = &["epoch", "mse"];
pub const PB_TRAJECTORY_HEADER: &[&str] = &["update", "t", "p1", "p2", "nearest", "dist_target"];
pub const METRICS_HEADER: &[&str] = &[
    "material", "loss", "pb", "seed", "steps", "e1_ave", "e2_ave", "e3_ave", "e2_excluded", "mean_tau_roll_ref",
    "mean_f_z_ref",
];
pub const PCA_HEADER: &[&str] = &["kind", "material", "trial", "p1", "p2", "pc1", "pc2"];

pub const CHECKPOINT_FILE: &str = "checkpoint.twck";
pub const EPISODE_DIR: &str = "episodes";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NonFiniteCommand(_) => Self::Numeric(e.to_string()),
            SimError::BadTimeStep(_) => Self::Numeric(e.to_string()),
            SimError::InvalidMaterial { .. } | SimError::Library(_) => Self::Config(e.to_string()),
        }
    }
}

impl From<NetError> for HarnessError {
    fn from(e: NetError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TtnpbError> for HarnessError {
    fn from(e: TtnpbError) -> Self {
        match e {
            TtnpbError::NonFinite(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TaskError> for HarnessError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::NonFiniteLoss { .. } => Self::Numeric(e.to_string()),
            TaskError::Config(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: ExperimentConfig,
    pub checkpoint_sha256: Option<String>,
    pub csv_schema: u32,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

impl RunRecord {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config: cfg.clone(),
            checkpoint_sha256: None,
            csv_schema: CSV_SCHEMA_VERSION,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>, HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

/// Writes `path` through a temporary sibling so aborted runs leave nothing.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), HarnessError> {
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        fill(&mut w)?;
        w.flush()?;
        drop(w);
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Simulated data collection: one episode per (material, sigma setting).
pub fn cmd_collect(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let dir = out.join(EPISODE_DIR);
    fs::create_dir_all(&dir)?;
    let mut rec = RunRecord::new("collect", cfg);
    let mut total = 0;
    let result = (|| {
        for (i, m) in cfg.collect.materials.iter().enumerate() {
            for (j, sigma) in cfg.collect.sigmas.iter().enumerate() {
                let key = [i as u64, j as u64];
                let ep = random_walk_episode(
                    cfg,
                    m,
                    j as u32,
                    *sigma,
                    cfg.collect.steps,
                    derive_seed(cfg.seed, &[1, key[0], key[1]]),
                    derive_seed(cfg.seed, &[2, key[0], key[1]]),
                )?;
                let path = dir.join(format!("{m}_s{j}.jsonl"));
                write_atomic(&path, |w| write_episode(&ep, w))?;
                total += ep.steps.len();
                rec.outputs.push(show(&path));
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        for p in &rec.outputs {
            let _ = fs::remove_file(p);
        }
        return Err(e);
    }
    rec.summary = serde_json::json!({ "episodes": rec.outputs.len(), "steps": total });
    rec.save(&out.join("collect_record.json"))?;
    Ok(rec)
}

pub fn load_episodes(dir: &Path) -> Result<Vec<Episode>, HarnessError> {
    let eps = read_episode_dir(dir)?;
    if eps.is_empty() {
        return Err(HarnessError::Data(format!("no episode files in {}", dir.display())));
    }
    Ok(eps)
}

/// Trains the transition network and the per-material PBs.
pub fn cmd_train(cfg: &ExperimentConfig, episodes_dir: &Path, out: &Path) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let episodes = load_episodes(episodes_dir)?;
    let mut materials: Vec<&str> = episodes.iter().map(|e| e.material.as_str()).collect();
    materials.sort_unstable();
    materials.dedup();
    if materials.len() < 2 {
        return Err(HarnessError::Data(format!("training needs at least two materials, found {}", materials.len())));
    }
    let tc = crate::ttnpb::TrainConfig { seed: derive_seed(cfg.seed, &[3]), ..cfg.train };
    let outcome = train(&episodes, cfg.scaling, &tc)?;
    fs::create_dir_all(out)?;
    let ck = Checkpoint { model: outcome.model, pbs: outcome.pbs.clone(), config_echo: serde_json::to_string(cfg)? };
    let ck_path = out.join(CHECKPOINT_FILE);
    let sha = ck.save(&ck_path)?;

    let pb_path = out.join("pb_table.csv");
    let mut w = csv_writer(&pb_path, PB_TABLE_HEADER)?;
    for (m, p) in &outcome.pbs.0 {
        w.write_record([m.clone(), p.0[0].to_string(), p.0[1].to_string()])?;
    }
    w.flush()?;
    let curve_path = out.join("loss_curve.csv");
    let mut w = csv_writer(&curve_path, LOSS_CURVE_HEADER)?;
    for (e, l) in outcome.loss_curve.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;

    let mut rec = RunRecord::new("train", cfg);
    rec.checkpoint_sha256 = Some(sha);
    rec.inputs = episodes_files(episodes_dir)?;
    rec.outputs = vec![show(&ck_path), show(&pb_path), show(&curve_path)];
    rec.summary = serde_json::json!({
        "epochs": outcome.loss_curve.len(),
        "initial_mse": outcome.initial_mse,
        "final_mse": outcome.final_mse,
        "materials": materials,
    });
    rec.save(&out.join("train_record.json"))?;
    Ok(rec)
}

fn episodes_files(dir: &Path) -> Result<Vec<String>, HarnessError> {
    let mut files: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .map(|p| show(&p))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a checkpoint, verifying its hash against the training record next
/// to it when there is one.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String), HarnessError> {
    let (ck, sha) = Checkpoint::load(path)?;
    let record = path.with_file_name("train_record.json");
    if record.exists() {
        let rec = RunRecord::load(&record)?;
        if let Some(expected) = rec.checkpoint_sha256 {
            if expected != sha {
                return Err(HarnessError::Data(format!(
                    "checkpoint {} has sha256 {sha}, training record says {expected}",
                    path.display()
                )));
            }
        }
    }
    Ok((ck, sha))
}

/// Online recognition on the configured material. Returns the record and
/// the PB after every update.
pub fn cmd_recognize(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: &Path,
) -> Result<(RunRecord, Vec<PbUpdate>), HarnessError> {
    cfg.validate()?;
    let (ck, sha) = load_checkpoint(checkpoint)?;
    let rc = &cfg.recognize;
    let p0 = match &rc.init {
        Some(m) => *ck.pbs.get(m).ok_or_else(|| HarnessError::Data(format!("checkpoint has no PB for `{m}`")))?,
        None => ParametricBias::default(),
    };
    let updates = recognition_run(cfg, &ck.model, &rc.material, p0, derive_seed(cfg.seed, &[4]))?;
    let target = ck.pbs.get(&rc.material).copied();
    fs::create_dir_all(out)?;
    let path = out.join(format!("recognize_{}.csv", rc.material));
    let mut w = csv_writer(&path, PB_TRAJECTORY_HEADER)?;
    for (k, u) in updates.iter().enumerate() {
        let nearest = ck.pbs.nearest(&u.p).map(|n| n.0.to_string()).unwrap_or_default();
        let dist = target.map(|p| p.distance(&u.p).to_string()).unwrap_or_default();
        w.write_record([k.to_string(), u.t.to_string(), u.p.0[0].to_string(), u.p.0[1].to_string(), nearest, dist])?;
    }
    w.flush()?;
    let mut rec = RunRecord::new("recognize", cfg);
    rec.checkpoint_sha256 = Some(sha);
    rec.inputs = vec![show(checkpoint)];
    rec.outputs = vec![show(&path)];
    let last = updates.last().map(|u| u.p);
    rec.summary = serde_json::json!({
        "material": rc.material,
        "updates": updates.len(),
        "final_p": last.map(|p| p.0),
        "nearest": last.and_then(|p| ck.pbs.nearest(&p).map(|n| n.0.to_string())),
        "notice": updates.is_empty().then_some("fewer steps than the update threshold; no PB update happened"),
    });
    rec.save(&out.join(format!("recognize_{}_record.json", rc.material)))?;
    Ok((rec, updates))
}

/// Summary row of one control run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub material: String,
    pub loss: String,
    pub pb: String,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub mean_tau_roll_ref: f64,
    pub mean_f_z_ref: f64,
}

impl ControlSummary {
    fn record(&self) -> Vec<String> {
        let m = self.metrics;
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        vec![
            self.material.clone(),
            self.loss.clone(),
            self.pb.clone(),
            self.seed.to_string(),
            m.map_or(0, |m| m.steps).to_string(),
            f(m.map(|m| m.e1)),
            f(m.map(|m| m.e2)),
            f(m.map(|m| m.e3)),
            m.map_or(0, |m| m.e2_excluded).to_string(),
            self.mean_tau_roll_ref.to_string(),
            self.mean_f_z_ref.to_string(),
        ]
    }
}

fn summarize(cfg: &ExperimentConfig, ticks: &[ControlTick], metrics: Option<Metrics>) -> ControlSummary {
    let cc = &cfg.control;
    let after: Vec<&ControlTick> = ticks.iter().skip(cc.warmup).collect();
    let mean = |k: usize| {
        if after.is_empty() {
            f64::NAN
        } else {
            after.iter().map(|t| t.u_opt[k]).sum::<f64>() / after.len() as f64
        }
    };
    ControlSummary {
        material: cc.material.clone(),
        loss: cc.loss.name().into(),
        pb: cc.pb.to_string(),
        seed: cfg.seed,
        metrics,
        mean_tau_roll_ref: mean(0),
        mean_f_z_ref: mean(2),
    }
}

pub fn control_stem(cfg: &ExperimentConfig) -> String {
    let cc = &cfg.control;
    let pb = cc.pb.to_string().replace(':', "-");
    format!("control_{}_{}_{}_s{}", cc.material, cc.loss.name(), pb, cfg.seed)
}

/// Closed-loop run with the configured loss and PB mode. Basic mode needs
/// no checkpoint.
pub fn cmd_control(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(RunRecord, ControlSummary), HarnessError> {
    cfg.validate()?;
    let cc = &cfg.control;
    let loaded = match (checkpoint, &cc.pb) {
        (_, PbMode::Basic) => None,
        (Some(path), _) => Some(load_checkpoint(path)?),
        (None, _) => return Err(HarnessError::Config("predictive control needs a checkpoint".into())),
    };
    let p = match &loaded {
        Some((ck, _)) => mode_pb(&cc.pb, &ck.pbs, &cc.material)?,
        None => None,
    };
    let run = control_run(cfg, loaded.as_ref().map(|(ck, _)| &ck.model), p, derive_seed(cfg.seed, &[5]))?;
    fs::create_dir_all(out)?;
    let stem = control_stem(cfg);
    let log_path = out.join(format!("{stem}.jsonl"));
    write_atomic(&log_path, |w| {
        for t in &run.ticks {
            serde_json::to_writer(&mut *w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    let summary = summarize(cfg, &run.ticks, run.metrics);
    let metrics_path = out.join(format!("{stem}_metrics.csv"));
    let mut w = csv_writer(&metrics_path, METRICS_HEADER)?;
    w.write_record(summary.record())?;
    w.flush()?;
    let mut rec = RunRecord::new("control", cfg);
    if let Some((_, sha)) = &loaded {
        rec.checkpoint_sha256 = Some(sha.clone());
    }
    rec.inputs = checkpoint.filter(|_| loaded.is_some()).map(show).into_iter().collect();
    rec.outputs = vec![show(&log_path), show(&metrics_path)];
    rec.summary = serde_json::json!({
        "metrics": summary.metrics,
        "metrics_defined": summary.metrics.is_some(),
        "mean_tau_roll_ref": summary.mean_tau_roll_ref,
        "mean_f_z_ref": summary.mean_f_z_ref,
        "fallback_ticks": run.fallbacks,
    });
    rec.save(&out.join(format!("{stem}_record.json")))?;
    Ok((rec, summary))
}

pub fn read_control_log(path: &Path) -> Result<Vec<ControlTick>, HarnessError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut ticks = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ControlTick = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        ticks.push(t);
    }
    Ok(ticks)
}

/// Recomputes the metric averages of every control log in `dir` into
/// `dir/metrics.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig, dir: &Path) -> Result<(RunRecord, Vec<ControlSummary>), HarnessError> {
    let mut logs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("control_") && name.ends_with(".jsonl")
        })
        .collect();
    logs.sort();
    if logs.is_empty() {
        return Err(HarnessError::Data(format!("no control logs in {}", dir.display())));
    }
    let path = dir.join("metrics.csv");
    let mut w = csv_writer(&path, METRICS_HEADER)?;
    let mut rows = Vec::new();
    let mut rec = RunRecord::new("eval", cfg);
    for log in &logs {
        let record = PathBuf::from(log.to_string_lossy().replace(".jsonl", "_record.json"));
        // the run's own config, so warmup and labels match how it was produced
        let run_cfg = if record.exists() { RunRecord::load(&record)?.config } else { cfg.clone() };
        let ticks = read_control_log(log)?;
        let frames: Vec<_> = ticks
            .iter()
            .skip(run_cfg.control.warmup)
            .map(|t| crate::sim::SensorFrame::from_flat(&t.frame))
            .collect();
        let metrics = eval_metrics(&frames).ok();
        let s = summarize(&run_cfg, &ticks, metrics);
        w.write_record(s.record())?;
        rec.inputs.push(show(log));
        rows.push(s);
    }
    w.flush()?;
    rec.outputs = vec![show(&path)];
    rec.summary = serde_json::json!({ "runs": rows.len() });
    rec.save(&dir.join("eval_record.json"))?;
    Ok((rec, rows))
}

/// PB fitted to one episode with the network frozen, from the zero PB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPb {
    pub material: String,
    pub trial: u32,
    pub p: ParametricBias,
    pub mse: f64,
}

pub fn fit_run_pbs(
    model: &crate::ttnpb::TtnpbModel,
    episodes: &[Episode],
    iterations: usize,
    lr: f64,
    window: usize,
) -> Result<Vec<RunPb>, HarnessError> {
    episodes
        .iter()
        .map(|ep| {
            let (p, mse) = fit_pb(model, std::slice::from_ref(ep), ParametricBias::default(), iterations, lr, window)?;
            Ok(RunPb { material: ep.material.clone(), trial: ep.trial, p, mse })
        })
        .collect()
}

/// Principal axes of the trained material PBs, plus per-run PB fits when
/// episodes are given (projected on the same axes).
pub fn cmd_pca(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    episodes_dir: Option<&Path>,
    out: &Path,
) -> Result<(RunRecord, Pca, Vec<RunPb>), HarnessError> {
    let (ck, sha) = load_checkpoint(checkpoint)?;
    let table: &PbTable = &ck.pbs;
    let points: Vec<[f64; 2]> = table.0.values().map(|p| p.0).collect();
    let pca = pb_pca(&points).map_err(|e| HarnessError::Data(e.to_string()))?;
    let runs = match episodes_dir {
        Some(dir) => fit_run_pbs(&ck.model, &load_episodes(dir)?, 100, 0.05, cfg.train.window)?,
        None => Vec::new(),
    };
    let project = |p: [f64; 2]| {
        let d = [p[0] - pca.mean[0], p[1] - pca.mean[1]];
        let c = pca.components;
        [d[0] * c[0][0] + d[1] * c[0][1], d[0] * c[1][0] + d[1] * c[1][1]]
    };
    fs::create_dir_all(out)?;
    let path = out.join("pca.csv");
    let mut w = csv_writer(&path, PCA_HEADER)?;
    for ((m, p), proj) in table.0.iter().zip(&pca.projected) {
        w.write_record(["material", m, "", &p.0[0].to_string(), &p.0[1].to_string(), &proj[0].to_string(), &proj[1].to_string()])?;
    }
    for r in &runs {
        let proj = project(r.p.0);
        w.write_record(["run", &r.material, &r.trial.to_string(), &r.p.0[0].to_string(), &r.p.0[1].to_string(), &proj[0].to_string(), &proj[1].to_string()])?;
    }
    w.flush()?;
    let mut rec = RunRecord::new("pca", cfg);
    rec.checkpoint_sha256 = Some(sha);
    rec.inputs = std::iter::once(show(checkpoint)).chain(episodes_dir.map(show)).collect();
    rec.outputs = vec![show(&path)];
    rec.summary = serde_json::json!({
        "mean": pca.mean,
        "components": pca.components,
        "eigenvalues": pca.eigenvalues,
    });
    rec.save(&out.join("pca_record.json"))?;
    Ok((rec, pca, runs))
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netcore::{Backward, LayerSpec, OptimConfig, Optimizer, Tape};

use super::model::{ttnpb_specs, Scaling, TtnpbModel, INPUT_DIM, N_F, P_OFFSET};
use super::{Episode, ParametricBias, PbTable, TtnpbError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Truncated-BPTT window, steps.
    pub window: usize,
    pub stride: usize,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a relative improvement of
    /// `min_improvement` in the best epoch loss.
    pub patience: usize,
    pub min_improvement: f64,
    pub lr: f64,
    /// Adam step size of the PBs.
    pub pb_lr: f64,
    /// Full-batch PB-only iterations per material after the joint phase,
    /// with the weights frozen. Zero disables the pass.
    pub pb_refine_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window: 20,
            stride: 10,
            batch: 32,
            max_epochs: 200,
            patience: 20,
            min_improvement: 1e-3,
            lr: 1e-3,
            pb_lr: 1e-2,
            pb_refine_iters: 150,
        }
    }
}

/// A training window: `len` input steps starting at `start`, each paired
/// with the next step's frame as target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
    pub len: usize,
}

pub fn windows(episodes: &[Episode], window: usize, stride: usize) -> Vec<Window> {
    assert!(window > 0 && stride > 0, "window and stride must be positive");
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let transitions = ep.steps.len().saturating_sub(1);
        if transitions == 0 {
            continue;
        }
        let len = window.min(transitions);
        let mut start = 0;
        while start + len <= transitions {
            out.push(Window { episode: e, start, len });
            start += stride;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TtnpbModel,
    pub pbs: PbTable,
    /// Mean training MSE of each epoch (scaled units).
    pub loss_curve: Vec<f64>,
    /// Full-dataset MSE before the first and after the last update.
    pub initial_mse: f64,
    pub final_mse: f64,
}

pub(super) struct BatchResult {
    pub loss: f64,
    pub weight_grads: Option<Vec<f64>>,
    /// Gradient of the loss w.r.t. the PB input of each window.
    pub pb_grads: Vec<[f64; 2]>,
}

/// Forward and (optionally) backward over a batch of equal-length windows.
/// The MSE is averaged over windows, steps and frame entries.
pub(super) fn batch_pass(
    model: &TtnpbModel,
    episodes: &[Episode],
    batch: &[Window],
    pbs: &[ParametricBias],
    backward: Option<bool>,
) -> Result<BatchResult, TtnpbError> {
    let b = batch.len();
    let len = batch[0].len;
    debug_assert!(batch.iter().all(|w| w.len == len));
    let norm = (b * len * N_F) as f64;
    let mut state = model.net.zero_state(b);
    let mut tape = Tape::new();
    let mut out_grads = Vec::with_capacity(len);
    let mut loss = 0.0;
    let mut rows = vec![0.0; b * INPUT_DIM];
    for t in 0..len {
        for (r, (w, p)) in batch.iter().zip(pbs).enumerate() {
            let step = &episodes[w.episode].steps[w.start + t];
            rows[r * INPUT_DIM..(r + 1) * INPUT_DIM].copy_from_slice(&model.scaling.step_row(step, p));
        }
        let y = model.net.forward(&rows, &mut state, backward.is_some().then_some(&mut tape))?;
        let mut dy = vec![0.0; b * N_F];
        for (r, w) in batch.iter().enumerate() {
            let target = model.scaling.frame(&episodes[w.episode].steps[w.start + t + 1].frame);
            for k in 0..N_F {
                let e = y[r * N_F + k] - target[k];
                loss += e * e;
                dy[r * N_F + k] = 2.0 * e / norm;
            }
        }
        out_grads.push(dy);
    }
    let loss = loss / norm;
    let Some(weight_grads) = backward else {
        return Ok(BatchResult { loss, weight_grads: None, pb_grads: Vec::new() });
    };
    let mut pass = Backward::new(&model.net, &tape, weight_grads);
    let mut pb_grads = vec![[0.0; 2]; b];
    for dy in out_grads.iter().rev() {
        let dx = pass.step(dy)?;
        for (r, g) in pb_grads.iter_mut().enumerate() {
            g[0] += dx[r * INPUT_DIM + P_OFFSET];
            g[1] += dx[r * INPUT_DIM + P_OFFSET + 1];
        }
    }
    Ok(BatchResult { loss, weight_grads: pass.finish(), pb_grads })
}

fn batches(windows: &[Window], order: &[usize], size: usize) -> Vec<Vec<Window>> {
    // equal-length windows only, in shuffled order within each length
    let mut by_len: BTreeMap<usize, Vec<Window>> = BTreeMap::new();
    for &i in order {
        by_len.entry(windows[i].len).or_default().push(windows[i]);
    }
    by_len
        .into_values()
        .flat_map(|ws| ws.chunks(size).map(<[Window]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn evaluate(
    model: &TtnpbModel,
    episodes: &[Episode],
    windows: &[Window],
    pb_of: &dyn Fn(&Window) -> ParametricBias,
    size: usize,
) -> Result<f64, TtnpbError> {
    let order: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0;
    let mut count = 0.0;
    for batch in batches(windows, &order, size) {
        let pbs: Vec<_> = batch.iter().map(pb_of).collect();
        let r = batch_pass(model, episodes, &batch, &pbs, None)?;
        let weight = (batch.len() * batch[0].len) as f64;
        total += r.loss * weight;
        count += weight;
    }
    Ok(total / count)
}

/// Joint optimizer over the network weights and one PB per material. PBs
/// start at zero; a material's PB is only stepped when it appears in the
/// batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TtnpbModel,
    pub materials: Vec<String>,
    pub pbs: Vec<ParametricBias>,
    mat_of: Vec<usize>,
    w_opt: Optimizer,
    p_opts: Vec<Optimizer>,
}

impl Trainer {
    pub fn new(model: TtnpbModel, episodes: &[Episode], lr: f64, pb_lr: f64) -> Result<Self, TtnpbError> {
        let mut materials: Vec<String> = episodes.iter().map(|e| e.material.clone()).collect();
        materials.sort();
        materials.dedup();
        if materials.is_empty() {
            return Err(TtnpbError::InsufficientData("no episodes".into()));
        }
        let mat_of = episodes
            .iter()
            .map(|e| materials.iter().position(|m| *m == e.material).expect("material indexed"))
            .collect();
        Ok(Self {
            w_opt: Optimizer::new(OptimConfig::adam(lr), model.net.weights().len()),
            p_opts: materials.iter().map(|_| Optimizer::new(OptimConfig::adam(pb_lr), 2)).collect(),
            pbs: vec![ParametricBias::default(); materials.len()],
            model,
            materials,
            mat_of,
        })
    }

    pub fn pb_of(&self, w: &Window) -> ParametricBias {
        self.pbs[self.mat_of[w.episode]]
    }

    /// One Adam step on the weights and on the PBs of the materials present.
    pub fn train_batch(&mut self, episodes: &[Episode], batch: &[Window]) -> Result<f64, TtnpbError> {
        let batch_pbs: Vec<_> = batch.iter().map(|w| self.pb_of(w)).collect();
        let r = batch_pass(&self.model, episodes, batch, &batch_pbs, Some(true))?;
        if !r.loss.is_finite() {
            return Ok(r.loss);
        }
        let grads = r.weight_grads.expect("weight gradients requested");
        self.w_opt.step(self.model.net.weights_mut(), &grads);
        let mut per_mat: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
        for (w, g) in batch.iter().zip(&r.pb_grads) {
            let acc = per_mat.entry(self.mat_of[w.episode]).or_insert([0.0; 2]);
            acc[0] += g[0];
            acc[1] += g[1];
        }
        for (m, g) in per_mat {
            self.p_opts[m].step(&mut self.pbs[m].0, &g);
        }
        Ok(r.loss)
    }

    pub fn evaluate(&self, episodes: &[Episode], windows: &[Window], batch: usize) -> Result<f64, TtnpbError> {
        evaluate(&self.model, episodes, windows, &|w| self.pb_of(w), batch)
    }

    pub fn pb_table(&self) -> PbTable {
        PbTable(self.materials.iter().cloned().zip(self.pbs.iter().copied()).collect())
    }
}

/// Trains the standard layer stack; see [`train_with_specs`].
pub fn train(
    episodes: &[Episode],
    scaling: Scaling,
    config: &TrainConfig,
) -> Result<TrainOutcome, TtnpbError> {
    train_with_specs(episodes, ttnpb_specs(), scaling, config)
}

/// Shuffled minibatch training of weights and per-material PBs until
/// `max_epochs` or an early stop on a plateau of the epoch loss.
pub fn train_with_specs(
    episodes: &[Episode],
    specs: Vec<LayerSpec>,
    scaling: Scaling,
    config: &TrainConfig,
) -> Result<TrainOutcome, TtnpbError> {
    let all = windows(episodes, config.window, config.stride);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = TtnpbModel::with_specs(specs, scaling, &mut rng)?;
    let mut trainer = Trainer::new(model, episodes, config.lr, config.pb_lr)?;
    for m in &trainer.materials {
        if !all.iter().any(|w| &episodes[w.episode].material == m) {
            return Err(TtnpbError::InsufficientData(format!("material `{m}` has no training window")));
        }
    }

    let initial_mse = trainer.evaluate(episodes, &all, config.batch)?;
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0.0;
        for batch in batches(&all, &order, config.batch) {
            let loss = trainer.train_batch(episodes, &batch)?;
            if !loss.is_finite() {
                return Err(TtnpbError::NonFinite(epoch));
            }
            let weight = (batch.len() * batch[0].len) as f64;
            total += loss * weight;
            count += weight;
        }
        let epoch_loss = total / count;
        curve.push(epoch_loss);
        if epoch_loss < best * (1.0 - config.min_improvement) {
            best = epoch_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    // Late in the joint phase the per-batch PB gradients are mostly noise, so
    // the PBs lag the optimum of the final weights. Settle them.
    if config.pb_refine_iters > 0 {
        for m in 0..trainer.materials.len() {
            let mine: Vec<Episode> =
                episodes.iter().filter(|e| e.material == trainer.materials[m]).cloned().collect();
            let (p, _) = fit_pb(&trainer.model, &mine, trainer.pbs[m], config.pb_refine_iters, 0.02, config.window)?;
            trainer.pbs[m] = p;
        }
    }
    let final_mse = trainer.evaluate(episodes, &all, config.batch)?;
    let pbs = trainer.pb_table();
    Ok(TrainOutcome { model: trainer.model, pbs, loss_curve: curve, initial_mse, final_mse })
}

/// PB-only fit with frozen weights: full-batch Adam over the windows of
/// `episodes`, starting from `init`. Returns the fitted PB and final MSE.
pub fn fit_pb(
    model: &TtnpbModel,
    episodes: &[Episode],
    init: ParametricBias,
    iterations: usize,
    lr: f64,
    window: usize,
) -> Result<(ParametricBias, f64), TtnpbError> {
    let all = windows(episodes, window, window);
    if all.is_empty() {
        return Err(TtnpbError::InsufficientData("no window to fit a PB on".into()));
    }
    let order: Vec<usize> = (0..all.len()).collect();
    let groups = batches(&all, &order, all.len());
    let mut p = init;
    let mut opt = Optimizer::new(OptimConfig::adam(lr), 2);
    for _ in 0..iterations {
        let mut g = [0.0; 2];
        for batch in &groups {
            let pbs = vec![p; batch.len()];
            let r = batch_pass(model, episodes, batch, &pbs, Some(false))?;
            for pg in &r.pb_grads {
                g[0] += pg[0];
                g[1] += pg[1];
            }
        }
        opt.step(&mut p.0, &g);
    }
    let mse = evaluate(model, episodes, &all, &|_| p, all.len())?;
    Ok((p, mse))
}

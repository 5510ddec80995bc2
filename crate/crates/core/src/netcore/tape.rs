use super::gemm::gemm;
use super::{Activation, LayerKind, LayerSpec, NetError, Network, RecurrentState};

#[derive(Debug, Clone)]
enum LayerRecord {
    Fc {
        input: Vec<f64>,
        /// post-activation output
        output: Vec<f64>,
    },
    Lstm {
        input: Vec<f64>,
        h_prev: Vec<f64>,
        c_prev: Vec<f64>,
        /// gate activations `[i, f, g, o]` per batch row, `batch x 4H`
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
}

/// Everything the reverse pass needs from a run of forward steps.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    batch: usize,
    steps: Vec<Vec<LayerRecord>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Network {
    /// One time step for a batch. `input` is `batch x in_dim` row-major with
    /// `batch = state.batch`. The recurrent state is advanced in place.
    pub fn forward(
        &self,
        input: &[f64],
        state: &mut RecurrentState,
        mut tape: Option<&mut Tape>,
    ) -> Result<Vec<f64>, NetError> {
        let batch = state.batch;
        let expected = batch * self.in_dim();
        if input.len() != expected {
            return Err(NetError::DimensionMismatch { expected, got: input.len() });
        }
        if let Some(t) = tape.as_deref_mut() {
            if t.steps.is_empty() {
                t.batch = batch;
            } else if t.batch != batch {
                return Err(NetError::DimensionMismatch { expected: t.batch, got: batch });
            }
        }
        let mut records = Vec::with_capacity(if tape.is_some() { self.specs.len() } else { 0 });
        let mut x = input.to_vec();
        let mut lstm_idx = 0;
        for (l, spec) in self.specs.iter().enumerate() {
            let w = self.layer_weights(l);
            let (y, rec) = match spec.kind {
                LayerKind::FullyConnected => {
                    let y = fc_forward(spec, w, &x, batch);
                    let rec = tape.is_some().then(|| LayerRecord::Fc { input: x, output: y.clone() });
                    (y, rec)
                }
                LayerKind::Lstm => {
                    let st = &mut state.layers[lstm_idx];
                    lstm_idx += 1;
                    let (gates, c, tanh_c, h) = lstm_forward(spec, w, &x, &st.h, &st.c, batch);
                    let h_prev = std::mem::replace(&mut st.h, h.clone());
                    let c_prev = std::mem::replace(&mut st.c, c);
                    let rec = tape
                        .is_some()
                        .then(|| LayerRecord::Lstm { input: x, h_prev, c_prev, gates, tanh_c });
                    (h, rec)
                }
            };
            if let Some(r) = rec {
                records.push(r);
            }
            x = y;
        }
        if let Some(t) = tape {
            t.steps.push(records);
        }
        Ok(x)
    }

    /// Plain reverse pass over a whole tape: `output_grads[t]` is the loss
    /// gradient of step `t`'s output. Returns weight gradients and the
    /// gradient of every step's input.
    pub fn backward(&self, tape: &Tape, output_grads: &[Vec<f64>]) -> Result<Gradients, NetError> {
        if output_grads.len() != tape.len() {
            return Err(NetError::DimensionMismatch { expected: tape.len(), got: output_grads.len() });
        }
        let mut pass = Backward::new(self, tape, true);
        let mut inputs = vec![Vec::new(); tape.len()];
        for t in (0..tape.len()).rev() {
            inputs[t] = pass.step(&output_grads[t])?;
        }
        let weights = pass.finish().unwrap_or_default();
        Ok(Gradients { weights, inputs })
    }
}

fn fc_forward(spec: &LayerSpec, w: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
    let (i, o) = (spec.in_dim, spec.out_dim);
    let (mat, bias) = w.split_at(o * i);
    let mut y = Vec::with_capacity(batch * o);
    for _ in 0..batch {
        y.extend_from_slice(bias);
    }
    gemm(batch, i, o, 1.0, x, false, mat, true, 1.0, &mut y);
    if spec.activation == Activation::Tanh {
        y.iter_mut().for_each(|v| *v = v.tanh());
    }
    y
}

type LstmOut = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn lstm_forward(
    spec: &LayerSpec,
    w: &[f64],
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    batch: usize,
) -> LstmOut {
    let (i, h) = (spec.in_dim, spec.out_dim);
    let g = 4 * h;
    let (w_ih, rest) = w.split_at(g * i);
    let (w_hh, bias) = rest.split_at(g * h);
    let mut z = Vec::with_capacity(batch * g);
    for _ in 0..batch {
        z.extend_from_slice(bias);
    }
    gemm(batch, i, g, 1.0, x, false, w_ih, true, 1.0, &mut z);
    gemm(batch, h, g, 1.0, h_prev, false, w_hh, true, 1.0, &mut z);

    let mut c = vec![0.0; batch * h];
    let mut tanh_c = vec![0.0; batch * h];
    let mut out = vec![0.0; batch * h];
    for b in 0..batch {
        let zr = &mut z[b * g..(b + 1) * g];
        for k in 0..h {
            zr[k] = sigmoid(zr[k]);
            zr[h + k] = sigmoid(zr[h + k]);
            zr[2 * h + k] = zr[2 * h + k].tanh();
            zr[3 * h + k] = sigmoid(zr[3 * h + k]);
            let idx = b * h + k;
            c[idx] = zr[h + k] * c_prev[idx] + zr[k] * zr[2 * h + k];
            tanh_c[idx] = c[idx].tanh();
            out[idx] = zr[3 * h + k] * tanh_c[idx];
        }
    }
    (z, c, tanh_c, out)
}

/// Gradients from [`Network::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
}

/// Incremental reverse pass. Call [`Backward::step`] once per recorded step,
/// latest first; each call takes that step's output gradient and returns its
/// input gradient. This lets a caller feed a step's output back into the
/// next step's input (closed-loop rollouts) and route the gradient.
pub struct Backward<'a> {
    net: &'a Network,
    tape: &'a Tape,
    remaining: usize,
    dh: Vec<Vec<f64>>,
    dc: Vec<Vec<f64>>,
    grads: Option<Vec<f64>>,
}

impl<'a> Backward<'a> {
    pub fn new(net: &'a Network, tape: &'a Tape, weight_grads: bool) -> Self {
        let batch = tape.batch;
        let lstm: Vec<usize> = net
            .specs
            .iter()
            .filter(|s| s.kind == LayerKind::Lstm)
            .map(|s| batch * s.out_dim)
            .collect();
        Self {
            net,
            tape,
            remaining: tape.len(),
            dh: lstm.iter().map(|n| vec![0.0; *n]).collect(),
            dc: lstm.iter().map(|n| vec![0.0; *n]).collect(),
            grads: weight_grads.then(|| vec![0.0; net.weights.len()]),
        }
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    pub fn step(&mut self, output_grad: &[f64]) -> Result<Vec<f64>, NetError> {
        if self.remaining == 0 {
            return Err(NetError::DimensionMismatch { expected: 0, got: 1 });
        }
        self.remaining -= 1;
        let batch = self.tape.batch;
        let expected = batch * self.net.out_dim();
        if output_grad.len() != expected {
            return Err(NetError::DimensionMismatch { expected, got: output_grad.len() });
        }
        let records = &self.tape.steps[self.remaining];
        let mut dy = output_grad.to_vec();
        let mut lstm_idx = self.dh.len();
        for (l, spec) in self.net.specs.iter().enumerate().rev() {
            let w = self.net.layer_weights(l);
            let off = self.net.offset(l);
            let gw = self.grads.as_mut().map(|g| &mut g[off..off + spec.param_count()]);
            dy = match (&records[l], spec.kind) {
                (LayerRecord::Fc { input, output }, LayerKind::FullyConnected) => {
                    fc_backward(spec, w, input, output, dy, batch, gw)
                }
                (LayerRecord::Lstm { input, h_prev, c_prev, gates, tanh_c }, LayerKind::Lstm) => {
                    lstm_idx -= 1;
                    let dh = &mut self.dh[lstm_idx];
                    let dc = &mut self.dc[lstm_idx];
                    for (a, b) in dy.iter_mut().zip(dh.iter()) {
                        *a += b;
                    }
                    let (dx, dh_prev, dc_prev) =
                        lstm_backward(spec, w, input, h_prev, c_prev, gates, tanh_c, &dy, dc, batch, gw);
                    *dh = dh_prev;
                    *dc = dc_prev;
                    dx
                }
                _ => unreachable!("tape records follow the layer stack"),
            };
        }
        Ok(dy)
    }

    /// Accumulated weight gradients, if requested at construction.
    pub fn finish(self) -> Option<Vec<f64>> {
        self.grads
    }
}

fn fc_backward(
    spec: &LayerSpec,
    w: &[f64],
    input: &[f64],
    output: &[f64],
    mut dz: Vec<f64>,
    batch: usize,
    gw: Option<&mut [f64]>,
) -> Vec<f64> {
    let (i, o) = (spec.in_dim, spec.out_dim);
    if spec.activation == Activation::Tanh {
        for (d, y) in dz.iter_mut().zip(output) {
            *d *= 1.0 - y * y;
        }
    }
    let mat = &w[..o * i];
    if let Some(gw) = gw {
        let (gmat, gbias) = gw.split_at_mut(o * i);
        gemm(o, batch, i, 1.0, &dz, true, input, false, 1.0, gmat);
        for row in dz.chunks_exact(o) {
            for (gb, d) in gbias.iter_mut().zip(row) {
                *gb += d;
            }
        }
    }
    let mut dx = vec![0.0; batch * i];
    gemm(batch, o, i, 1.0, &dz, false, mat, false, 0.0, &mut dx);
    dx
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    spec: &LayerSpec,
    w: &[f64],
    input: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    gates: &[f64],
    tanh_c: &[f64],
    dh: &[f64],
    dc_next: &[f64],
    batch: usize,
    gw: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (i, h) = (spec.in_dim, spec.out_dim);
    let g = 4 * h;
    let mut dz = vec![0.0; batch * g];
    let mut dc_prev = vec![0.0; batch * h];
    for b in 0..batch {
        let gr = &gates[b * g..(b + 1) * g];
        let dzr = &mut dz[b * g..(b + 1) * g];
        for k in 0..h {
            let idx = b * h + k;
            let (ig, fg, cg, og) = (gr[k], gr[h + k], gr[2 * h + k], gr[3 * h + k]);
            let tc = tanh_c[idx];
            let dc = dc_next[idx] + dh[idx] * og * (1.0 - tc * tc);
            dzr[k] = dc * cg * ig * (1.0 - ig);
            dzr[h + k] = dc * c_prev[idx] * fg * (1.0 - fg);
            dzr[2 * h + k] = dc * ig * (1.0 - cg * cg);
            dzr[3 * h + k] = dh[idx] * tc * og * (1.0 - og);
            dc_prev[idx] = dc * fg;
        }
    }
    let (w_ih, rest) = w.split_at(g * i);
    let w_hh = &rest[..g * h];
    if let Some(gw) = gw {
        let (g_ih, rest) = gw.split_at_mut(g * i);
        let (g_hh, g_b) = rest.split_at_mut(g * h);
        gemm(g, batch, i, 1.0, &dz, true, input, false, 1.0, g_ih);
        gemm(g, batch, h, 1.0, &dz, true, h_prev, false, 1.0, g_hh);
        for row in dz.chunks_exact(g) {
            for (gb, d) in g_b.iter_mut().zip(row) {
                *gb += d;
            }
        }
    }
    let mut dx = vec![0.0; batch * i];
    gemm(batch, g, i, 1.0, &dz, false, w_ih, false, 0.0, &mut dx);
    let mut dh_prev = vec![0.0; batch * h];
    gemm(batch, g, h, 1.0, &dz, false, w_hh, false, 0.0, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

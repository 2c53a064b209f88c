//! Small neural networks with exact reverse-mode gradients.
//!
//! A [`Topology`] is a set of input branches, one per observation slot,
//! whose outputs are concatenated and fed through a shared trunk and then
//! through one or more heads. Layers are dense, 3x3 convolution (stride 1,
//! no padding) and a single LSTM cell. Parameters live in one flat vector.
//!
//! Forward passes record a per-step cache; backward walks the caches in
//! reverse, carrying LSTM state gradients between steps (BPTT).

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: String, expected: usize, got: usize },
    #[error("backward called without a cached forward pass")]
    NoForwardCached,
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("checkpoint topology does not match the network")]
    TopologyMismatch,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

fn mismatch(what: impl Into<String>, expected: usize, got: usize) -> NnError {
    NnError::ShapeMismatch { what: what.into(), expected, got }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
}

impl Activation {
    fn apply(self, z: &mut [f64]) {
        match self {
            Self::Linear => {}
            Self::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            Self::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
            Self::Sigmoid => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
            Self::Softmax => softmax_in_place(z),
        }
    }

    /// Turns `dy` (gradient w.r.t. the activation output `y`) into the
    /// gradient w.r.t. the pre-activation.
    fn backprop(self, y: &[f64], dy: &mut [f64]) {
        match self {
            Self::Linear => {}
            Self::Relu => dy.iter_mut().zip(y).for_each(|(d, &y)| {
                if y <= 0.0 {
                    *d = 0.0
                }
            }),
            Self::Tanh => dy.iter_mut().zip(y).for_each(|(d, &y)| *d *= 1.0 - y * y),
            Self::Sigmoid => dy.iter_mut().zip(y).for_each(|(d, &y)| *d *= y * (1.0 - y)),
            Self::Softmax => {
                let dot: f64 = dy.iter().zip(y).map(|(d, y)| d * y).sum();
                dy.iter_mut().zip(y).for_each(|(d, &y)| *d = y * (*d - dot));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense { inputs: usize, outputs: usize, activation: Activation },
    /// Input is channel-major `[channels][height][width]`; output is
    /// `[filters][height-2][width-2]`.
    Conv3x3 { channels: usize, height: usize, width: usize, filters: usize, activation: Activation },
    Lstm { inputs: usize, cell: usize },
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self::Dense { inputs, outputs, activation }
    }

    pub fn input_len(&self) -> usize {
        match *self {
            Self::Dense { inputs, .. } | Self::Lstm { inputs, .. } => inputs,
            Self::Conv3x3 { channels, height, width, .. } => channels * height * width,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            Self::Dense { outputs, .. } => outputs,
            Self::Conv3x3 { height, width, filters, .. } => filters * (height - 2) * (width - 2),
            Self::Lstm { cell, .. } => cell,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Self::Dense { inputs, outputs, .. } => outputs * (inputs + 1),
            Self::Conv3x3 { channels, filters, .. } => filters * (channels * 9 + 1),
            Self::Lstm { inputs, cell } => 4 * cell * (inputs + cell + 1),
        }
    }

    fn validate(&self) -> Result<(), NnError> {
        let ok = match *self {
            Self::Dense { inputs, outputs, .. } => inputs > 0 && outputs > 0,
            Self::Conv3x3 { channels, height, width, filters, .. } => {
                channels > 0 && filters > 0 && height >= 3 && width >= 3
            }
            Self::Lstm { inputs, cell } => inputs > 0 && cell > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(NnError::Topology(format!("degenerate layer {self:?}")))
        }
    }

    fn init(&self, params: &mut [f64], rng: &mut Rng) {
        let mut glorot = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
        };
        match *self {
            Self::Dense { inputs, outputs, .. } => {
                let (w, b) = params.split_at_mut(inputs * outputs);
                glorot(w, inputs, outputs);
                b.fill(0.0);
            }
            Self::Conv3x3 { channels, filters, .. } => {
                let (w, b) = params.split_at_mut(filters * channels * 9);
                glorot(w, channels * 9, filters * 9);
                b.fill(0.0);
            }
            Self::Lstm { inputs, cell } => {
                let (w, b) = params.split_at_mut(4 * cell * (inputs + cell));
                glorot(w, inputs + cell, 4 * cell);
                b.fill(0.0);
                // gate order i, f, g, o
                b[cell..2 * cell].fill(1.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Index of the observation slot this branch reads.
    pub input: usize,
    /// Empty means the slot is passed through unchanged.
    pub layers: Vec<Layer>,
    /// Slot length, needed when `layers` is empty.
    pub input_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub branches: Vec<Branch>,
    pub trunk: Vec<Layer>,
    pub heads: Vec<Vec<Layer>>,
}

impl Topology {
    /// Single-input multilayer perceptron with one head per `(size, activation)`.
    pub fn mlp(input: usize, hidden: &[usize], hidden_activation: Activation, heads: &[(usize, Activation)]) -> Self {
        let mut trunk = Vec::new();
        let mut width = input;
        for &h in hidden {
            trunk.push(Layer::dense(width, h, hidden_activation));
            width = h;
        }
        Self {
            branches: vec![Branch { input: 0, layers: Vec::new(), input_len: input }],
            trunk,
            heads: heads.iter().map(|&(n, a)| vec![Layer::dense(width, n, a)]).collect(),
        }
    }

    fn chain_out(what: &str, input: usize, layers: &[Layer]) -> Result<usize, NnError> {
        let mut width = input;
        for (k, l) in layers.iter().enumerate() {
            l.validate()?;
            if l.input_len() != width {
                return Err(mismatch(format!("{what} layer {k} input"), l.input_len(), width));
            }
            width = l.output_len();
        }
        Ok(width)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.branches.is_empty() || self.heads.is_empty() {
            return Err(NnError::Topology("need at least one branch and one head".into()));
        }
        let mut concat = 0;
        for (k, b) in self.branches.iter().enumerate() {
            concat += Self::chain_out(&format!("branch {k}"), b.input_len, &b.layers)?;
        }
        let trunk_out = Self::chain_out("trunk", concat, &self.trunk)?;
        for (k, h) in self.heads.iter().enumerate() {
            Self::chain_out(&format!("head {k}"), trunk_out, h)?;
        }
        Ok(())
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.branches
            .iter()
            .flat_map(|b| b.layers.iter())
            .chain(self.trunk.iter())
            .chain(self.heads.iter().flatten())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Layer::param_count).sum()
    }

    pub fn input_lens(&self) -> Vec<(usize, usize)> {
        self.branches.iter().map(|b| (b.input, b.input_len)).collect()
    }

    pub fn output_lens(&self) -> Vec<usize> {
        let trunk_out = self.trunk.last().map(Layer::output_len).unwrap_or_else(|| {
            self.branches.iter().map(|b| b.layers.last().map_or(b.input_len, Layer::output_len)).sum()
        });
        self.heads.iter().map(|h| h.last().map_or(trunk_out, Layer::output_len)).collect()
    }

    fn lstm_cells(&self) -> Vec<usize> {
        self.layers()
            .filter_map(|l| match *l {
                Layer::Lstm { cell, .. } => Some(cell),
                _ => None,
            })
            .collect()
    }
}

/// LSTM hidden and cell vectors, one pair per LSTM layer in topology order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecurrentState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum Cache {
    Dense { x: Vec<f64>, y: Vec<f64> },
    Conv { x: Vec<f64>, y: Vec<f64> },
    Lstm { x: Vec<f64>, h_prev: Vec<f64>, c_prev: Vec<f64>, gates: Vec<f64>, c: Vec<f64> },
}

/// Caches for one forward step.
#[derive(Debug, Clone)]
pub struct StepTape {
    caches: Vec<Cache>,
}

/// Forward record of a whole sequence, consumed by [`Network::backward_sequence`].
#[derive(Debug, Clone)]
pub struct SequenceTape {
    steps: Vec<StepTape>,
    pub outputs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    topology: Topology,
    params: Vec<f64>,
    offsets: Vec<usize>,
    cached: Option<StepTape>,
}

/// Networks compare by topology and parameters; a cached forward pass is
/// not part of the value.
impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.topology == other.topology && self.params == other.params
    }
}

impl Network {
    pub fn new(topology: Topology, rng: &mut Rng) -> Result<Self, NnError> {
        let mut net = Self::zeros(topology)?;
        let layers: Vec<Layer> = net.topology.layers().cloned().collect();
        for (k, l) in layers.iter().enumerate() {
            let start = net.offsets[k];
            l.init(&mut net.params[start..start + l.param_count()], rng);
        }
        Ok(net)
    }

    pub fn zeros(topology: Topology) -> Result<Self, NnError> {
        topology.validate()?;
        let mut offsets = Vec::new();
        let mut total = 0;
        for l in topology.layers() {
            offsets.push(total);
            total += l.param_count();
        }
        Ok(Self { params: vec![0.0; total], topology, offsets, cached: None })
    }

    pub fn with_params(topology: Topology, params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Self::zeros(topology)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(mismatch("parameter vector", self.params.len(), params.len()));
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the parameters of the last layer of every head.
    pub fn zero_head_outputs(&mut self) {
        let n_before: usize = self.topology.branches.iter().map(|b| b.layers.len()).sum::<usize>() + self.topology.trunk.len();
        let mut k = n_before;
        for head in &self.topology.heads {
            if let Some(last) = head.last() {
                let idx = k + head.len() - 1;
                let start = self.offsets[idx];
                self.params[start..start + last.param_count()].fill(0.0);
            }
            k += head.len();
        }
    }

    pub fn initial_state(&self) -> RecurrentState {
        let cells = self.topology.lstm_cells();
        RecurrentState { h: cells.iter().map(|&c| vec![0.0; c]).collect(), c: cells.iter().map(|&c| vec![0.0; c]).collect() }
    }

    fn check_inputs(&self, inputs: &[Vec<f64>]) -> Result<(), NnError> {
        for (k, b) in self.topology.branches.iter().enumerate() {
            let slot = inputs.get(b.input).ok_or_else(|| mismatch(format!("branch {k} slot"), b.input + 1, inputs.len()))?;
            if slot.len() != b.input_len {
                return Err(mismatch(format!("input slot {}", b.input), b.input_len, slot.len()));
            }
        }
        Ok(())
    }

    fn check_state(&self, state: &RecurrentState) -> Result<(), NnError> {
        let cells = self.topology.lstm_cells();
        if state.h.len() != cells.len() || state.c.len() != cells.len() {
            return Err(mismatch("recurrent state layers", cells.len(), state.h.len()));
        }
        for (k, &c) in cells.iter().enumerate() {
            if state.h[k].len() != c || state.c[k].len() != c {
                return Err(mismatch(format!("lstm {k} state"), c, state.h[k].len()));
            }
        }
        Ok(())
    }

    /// Pure forward pass.
    pub fn forward(&self, inputs: &[Vec<f64>], state: &RecurrentState) -> Result<(Vec<Vec<f64>>, RecurrentState), NnError> {
        self.check_inputs(inputs)?;
        self.check_state(state)?;
        let mut state = state.clone();
        let (out, _) = self.step(inputs, &mut state);
        Ok((out, state))
    }

    /// Forward pass that keeps its cache for a following [`Network::backward`].
    pub fn forward_cached(&mut self, inputs: &[Vec<f64>], state: &RecurrentState) -> Result<(Vec<Vec<f64>>, RecurrentState), NnError> {
        self.check_inputs(inputs)?;
        self.check_state(state)?;
        let mut state = state.clone();
        let (out, tape) = self.step(inputs, &mut state);
        self.cached = Some(tape);
        Ok((out, state))
    }

    /// Parameter gradient of `sum_k upstream[k] . outputs[k]` for the cached
    /// forward pass. Consumes the cache.
    pub fn backward(&mut self, upstream: &[Vec<f64>]) -> Result<Vec<f64>, NnError> {
        let tape = self.cached.take().ok_or(NnError::NoForwardCached)?;
        self.check_upstream(upstream)?;
        let mut grads = vec![0.0; self.params.len()];
        let mut carry = self.zero_carry();
        self.backward_step(&tape, upstream, &mut carry, &mut grads);
        Ok(grads)
    }

    pub fn forward_sequence(&self, inputs: &[Vec<Vec<f64>>], state: &RecurrentState) -> Result<SequenceTape, NnError> {
        self.check_state(state)?;
        let mut state = state.clone();
        let mut tape = SequenceTape { steps: Vec::with_capacity(inputs.len()), outputs: Vec::with_capacity(inputs.len()) };
        for x in inputs {
            self.check_inputs(x)?;
            let (out, step) = self.step(x, &mut state);
            tape.outputs.push(out);
            tape.steps.push(step);
        }
        Ok(tape)
    }

    /// Gradient of `sum_t sum_k upstream[t][k] . outputs[t][k]`, accumulated
    /// into `grads`.
    pub fn backward_sequence(&self, tape: &SequenceTape, upstream: &[Vec<Vec<f64>>], grads: &mut [f64]) -> Result<(), NnError> {
        if upstream.len() != tape.steps.len() {
            return Err(mismatch("sequence length", tape.steps.len(), upstream.len()));
        }
        if grads.len() != self.params.len() {
            return Err(mismatch("gradient vector", self.params.len(), grads.len()));
        }
        upstream.iter().try_for_each(|u| self.check_upstream(u))?;
        let mut carry = self.zero_carry();
        for (step, up) in tape.steps.iter().zip(upstream).rev() {
            self.backward_step(step, up, &mut carry, grads);
        }
        Ok(())
    }

    fn check_upstream(&self, upstream: &[Vec<f64>]) -> Result<(), NnError> {
        let lens = self.topology.output_lens();
        if upstream.len() != lens.len() {
            return Err(mismatch("upstream heads", lens.len(), upstream.len()));
        }
        for (k, (u, &n)) in upstream.iter().zip(&lens).enumerate() {
            if u.len() != n {
                return Err(mismatch(format!("upstream head {k}"), n, u.len()));
            }
        }
        Ok(())
    }

    fn zero_carry(&self) -> RecurrentState {
        self.initial_state()
    }

    fn step(&self, inputs: &[Vec<f64>], state: &mut RecurrentState) -> (Vec<Vec<f64>>, StepTape) {
        let mut caches = Vec::new();
        let mut k = 0;
        let mut lstm = 0;
        let mut concat = Vec::new();
        for b in &self.topology.branches {
            let mut x = inputs[b.input].clone();
            for l in &b.layers {
                x = self.layer_forward(k, l, x, state, &mut lstm, &mut caches);
                k += 1;
            }
            concat.extend_from_slice(&x);
        }
        let mut x = concat;
        for l in &self.topology.trunk {
            x = self.layer_forward(k, l, x, state, &mut lstm, &mut caches);
            k += 1;
        }
        let mut outputs = Vec::with_capacity(self.topology.heads.len());
        for head in &self.topology.heads {
            let mut y = x.clone();
            for l in head {
                y = self.layer_forward(k, l, y, state, &mut lstm, &mut caches);
                k += 1;
            }
            outputs.push(y);
        }
        (outputs, StepTape { caches })
    }

    fn layer_forward(
        &self,
        k: usize,
        layer: &Layer,
        x: Vec<f64>,
        state: &mut RecurrentState,
        lstm: &mut usize,
        caches: &mut Vec<Cache>,
    ) -> Vec<f64> {
        let p = &self.params[self.offsets[k]..self.offsets[k] + layer.param_count()];
        match *layer {
            Layer::Dense { inputs, outputs, activation } => {
                let (w, b) = p.split_at(inputs * outputs);
                let mut y: Vec<f64> = b.to_vec();
                for (o, yo) in y.iter_mut().enumerate() {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    *yo += row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                }
                activation.apply(&mut y);
                caches.push(Cache::Dense { x, y: y.clone() });
                y
            }
            Layer::Conv3x3 { channels, height, width, filters, activation } => {
                let (oh, ow) = (height - 2, width - 2);
                let (w, b) = p.split_at(filters * channels * 9);
                let mut y = vec![0.0; filters * oh * ow];
                for f in 0..filters {
                    let out = &mut y[f * oh * ow..(f + 1) * oh * ow];
                    out.fill(b[f]);
                    for c in 0..channels {
                        let kern = &w[(f * channels + c) * 9..(f * channels + c + 1) * 9];
                        let plane = &x[c * height * width..(c + 1) * height * width];
                        for r in 0..oh {
                            for q in 0..ow {
                                let mut acc = 0.0;
                                for dr in 0..3 {
                                    let row = &plane[(r + dr) * width + q..(r + dr) * width + q + 3];
                                    acc += kern[dr * 3] * row[0] + kern[dr * 3 + 1] * row[1] + kern[dr * 3 + 2] * row[2];
                                }
                                out[r * ow + q] += acc;
                            }
                        }
                    }
                }
                activation.apply(&mut y);
                caches.push(Cache::Conv { x, y: y.clone() });
                y
            }
            Layer::Lstm { inputs, cell } => {
                let idx = *lstm;
                *lstm += 1;
                let h_prev = std::mem::take(&mut state.h[idx]);
                let c_prev = std::mem::take(&mut state.c[idx]);
                let cols = inputs + cell;
                let (w, b) = p.split_at(4 * cell * cols);
                let mut gates = b.to_vec();
                for (g, z) in gates.iter_mut().enumerate() {
                    let row = &w[g * cols..(g + 1) * cols];
                    *z += row[..inputs].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()
                        + row[inputs..].iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>();
                }
                for (g, z) in gates.iter_mut().enumerate() {
                    *z = if (2 * cell..3 * cell).contains(&g) { z.tanh() } else { sigmoid(*z) };
                }
                let mut c = vec![0.0; cell];
                let mut h = vec![0.0; cell];
                for j in 0..cell {
                    let (i, f, g, o) = (gates[j], gates[cell + j], gates[2 * cell + j], gates[3 * cell + j]);
                    c[j] = f * c_prev[j] + i * g;
                    h[j] = o * c[j].tanh();
                }
                state.h[idx] = h.clone();
                state.c[idx] = c.clone();
                caches.push(Cache::Lstm { x, h_prev, c_prev, gates, c });
                h
            }
        }
    }

    fn backward_step(&self, tape: &StepTape, upstream: &[Vec<f64>], carry: &mut RecurrentState, grads: &mut [f64]) {
        let layers: Vec<&Layer> = self.topology.layers().collect();
        let n_lstm = carry.h.len();
        let mut lstm = n_lstm;
        let mut k = layers.len();
        let trunk_out = self.topology.trunk.last().map(Layer::output_len).unwrap_or_else(|| {
            self.topology.branches.iter().map(|b| b.layers.last().map_or(b.input_len, Layer::output_len)).sum()
        });
        let mut d_trunk = vec![0.0; trunk_out];
        for (head, up) in self.topology.heads.iter().zip(upstream).rev() {
            let mut d = up.clone();
            for _ in head.iter().rev() {
                k -= 1;
                d = self.layer_backward(k, layers[k], &tape.caches[k], d, carry, &mut lstm, grads);
            }
            d_trunk.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        let mut d = d_trunk;
        for _ in self.topology.trunk.iter().rev() {
            k -= 1;
            d = self.layer_backward(k, layers[k], &tape.caches[k], d, carry, &mut lstm, grads);
        }
        let widths: Vec<usize> =
            self.topology.branches.iter().map(|b| b.layers.last().map_or(b.input_len, Layer::output_len)).collect();
        let mut end = d.len();
        for (b, &wdt) in self.topology.branches.iter().zip(&widths).rev() {
            let mut db = d[end - wdt..end].to_vec();
            end -= wdt;
            for _ in b.layers.iter().rev() {
                k -= 1;
                db = self.layer_backward(k, layers[k], &tape.caches[k], db, carry, &mut lstm, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        k: usize,
        layer: &Layer,
        cache: &Cache,
        mut dy: Vec<f64>,
        carry: &mut RecurrentState,
        lstm: &mut usize,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let start = self.offsets[k];
        let p = &self.params[start..start + layer.param_count()];
        let g = &mut grads[start..start + layer.param_count()];
        match (layer, cache) {
            (&Layer::Dense { inputs, outputs, activation }, Cache::Dense { x, y }) => {
                activation.backprop(y, &mut dy);
                let (w, _) = p.split_at(inputs * outputs);
                let (gw, gb) = g.split_at_mut(inputs * outputs);
                let mut dx = vec![0.0; inputs];
                for (o, &dz) in dy.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    gb[o] += dz;
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for i in 0..inputs {
                        grow[i] += dz * x[i];
                        dx[i] += dz * row[i];
                    }
                }
                dx
            }
            (&Layer::Conv3x3 { channels, height, width, filters, activation }, Cache::Conv { x, y }) => {
                activation.backprop(y, &mut dy);
                let (oh, ow) = (height - 2, width - 2);
                let (w, _) = p.split_at(filters * channels * 9);
                let (gw, gb) = g.split_at_mut(filters * channels * 9);
                let mut dx = vec![0.0; x.len()];
                for f in 0..filters {
                    let dout = &dy[f * oh * ow..(f + 1) * oh * ow];
                    gb[f] += dout.iter().sum::<f64>();
                    for c in 0..channels {
                        let base = (f * channels + c) * 9;
                        let plane = &x[c * height * width..(c + 1) * height * width];
                        let dplane = &mut dx[c * height * width..(c + 1) * height * width];
                        for r in 0..oh {
                            for q in 0..ow {
                                let d = dout[r * ow + q];
                                if d == 0.0 {
                                    continue;
                                }
                                for dr in 0..3 {
                                    for dq in 0..3 {
                                        let xi = (r + dr) * width + q + dq;
                                        gw[base + dr * 3 + dq] += d * plane[xi];
                                        dplane[xi] += d * w[base + dr * 3 + dq];
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            (&Layer::Lstm { inputs, cell }, Cache::Lstm { x, h_prev, c_prev, gates, c }) => {
                *lstm -= 1;
                let idx = *lstm;
                let cols = inputs + cell;
                let (w, _) = p.split_at(4 * cell * cols);
                let (gw, gb) = g.split_at_mut(4 * cell * cols);
                let dh_next = std::mem::take(&mut carry.h[idx]);
                let dc_next = std::mem::take(&mut carry.c[idx]);
                let mut dz = vec![0.0; 4 * cell];
                let mut dc_prev = vec![0.0; cell];
                for j in 0..cell {
                    let (i, f, gg, o) = (gates[j], gates[cell + j], gates[2 * cell + j], gates[3 * cell + j]);
                    let tc = c[j].tanh();
                    let dh = dy[j] + dh_next[j];
                    let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                    dz[j] = dc * gg * i * (1.0 - i);
                    dz[cell + j] = dc * c_prev[j] * f * (1.0 - f);
                    dz[2 * cell + j] = dc * i * (1.0 - gg * gg);
                    dz[3 * cell + j] = dh * tc * o * (1.0 - o);
                    dc_prev[j] = dc * f;
                }
                let mut dx = vec![0.0; inputs];
                let mut dh_prev = vec![0.0; cell];
                for (r, &d) in dz.iter().enumerate() {
                    gb[r] += d;
                    let row = &w[r * cols..(r + 1) * cols];
                    let grow = &mut gw[r * cols..(r + 1) * cols];
                    for i in 0..inputs {
                        grow[i] += d * x[i];
                        dx[i] += d * row[i];
                    }
                    for j in 0..cell {
                        grow[inputs + j] += d * h_prev[j];
                        dh_prev[j] += d * row[inputs + j];
                    }
                }
                carry.h[idx] = dh_prev;
                carry.c[idx] = dc_prev;
                dx
            }
            _ => unreachable!("cache does not match layer"),
        }
    }
}

/// Piecewise-constant learning rate: `base` until the first schedule
/// step, then the rate of the largest listed step not exceeding the
/// current step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRate {
    pub base: f64,
    pub schedule: Vec<(u64, f64)>,
}

impl LearningRate {
    pub fn constant(base: f64) -> Self {
        Self { base, schedule: Vec::new() }
    }

    pub fn at(&self, step: u64) -> f64 {
        self.schedule.iter().filter(|(s, _)| *s <= step).max_by_key(|(s, _)| *s).map_or(self.base, |&(_, r)| r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One descent step: `params -= rate * update(grads)`.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], optimizer: Optimizer, state: &mut OptimizerState, rate: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    match optimizer {
        Optimizer::Sgd => params.iter_mut().zip(grads).for_each(|(p, g)| *p -= rate * g),
        Optimizer::Adam { beta1, beta2, epsilon } => {
            if state.m.len() != params.len() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
                state.t = 0;
            }
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t.min(i32::MAX as u64) as i32);
            let c2 = 1.0 - beta2.powi(state.t.min(i32::MAX as u64) as i32);
            for i in 0..params.len() {
                let g = grads[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let step = rate * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + epsilon);
                params[i] -= step;
            }
        }
    }
}

/// Rescales `grads` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub topology: Topology,
    pub params: Vec<f64>,
}

impl Network {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { version: CHECKPOINT_VERSION, topology: self.topology.clone(), params: self.params.clone() }
    }

    /// Loads parameters from a checkpoint whose topology must equal this
    /// network's.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<(), NnError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Version(ck.version));
        }
        if ck.topology != self.topology {
            return Err(NnError::TopologyMismatch);
        }
        self.set_params(ck.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NnError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Version(ck.version));
        }
        Self::with_params(ck.topology.clone(), ck.params.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Step used for central differences.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared absolutely; central differences cannot resolve them relatively.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR)
}

/// Compares `analytic` with central differences of `loss` around `params`.
pub fn grad_check(loss: impl Fn(&[f64]) -> f64, params: &[f64], analytic: Vec<f64>) -> GradReport {
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_at(loss, params, &analytic, &all, GRADCHECK_STEP)
}

/// [`grad_check`] restricted to the coordinates in `indices`, with an
/// explicit step; the report's vectors follow the order of `indices`.
pub fn grad_check_at(loss: impl Fn(&[f64]) -> f64, params: &[f64], analytic: &[f64], indices: &[usize], step: f64) -> GradReport {
    finite_differences(loss, params, analytic, indices, |f| (f(step) - f(-step)) / (2.0 * step))
}

/// Like [`grad_check_at`] with the five-point stencil, whose O(h^4)
/// truncation error allows a larger step. Useful for losses with strong
/// curvature and small gradients, where no two-point step is clear of both
/// truncation and round-off error.
pub fn grad_check_five_point(loss: impl Fn(&[f64]) -> f64, params: &[f64], analytic: &[f64], indices: &[usize], step: f64) -> GradReport {
    finite_differences(loss, params, analytic, indices, |f| {
        (f(-2.0 * step) - 8.0 * f(-step) + 8.0 * f(step) - f(2.0 * step)) / (12.0 * step)
    })
}

fn finite_differences(
    loss: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    stencil: impl Fn(&mut dyn FnMut(f64) -> f64) -> f64,
) -> GradReport {
    let mut p = params.to_vec();
    let analytic: Vec<f64> = indices.iter().map(|&i| analytic[i]).collect();
    let numeric: Vec<f64> = indices
        .iter()
        .map(|&i| {
            let orig = p[i];
            let d = stencil(&mut |offset| {
                p[i] = orig + offset;
                loss(&p)
            });
            p[i] = orig;
            d
        })
        .collect();
    let max_rel_err = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
    GradReport { analytic, numeric, max_rel_err }
}

/// Gradient check of a network over an input sequence with a random linear
/// readout of every output.
pub fn network_grad_check(net: &Network, inputs: &[Vec<Vec<f64>>], rng: &mut Rng) -> Result<GradReport, NnError> {
    let lens = net.topology().output_lens();
    let weights: Vec<Vec<Vec<f64>>> = inputs
        .iter()
        .map(|_| lens.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
        .collect();
    let state = net.initial_state();
    let tape = net.forward_sequence(inputs, &state)?;
    let mut grads = vec![0.0; net.param_count()];
    net.backward_sequence(&tape, &weights, &mut grads)?;
    let topo = net.topology().clone();
    let loss = |p: &[f64]| {
        let n = Network::with_params(topo.clone(), p.to_vec()).unwrap();
        let tape = n.forward_sequence(inputs, &state).unwrap();
        tape.outputs
            .iter()
            .zip(&weights)
            .map(|(out, w)| out.iter().flatten().zip(w.iter().flatten()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    Ok(grad_check(loss, net.params(), grads))
}

/// Uniform random inputs matching a topology's slots.
pub fn random_inputs(topology: &Topology, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n_slots = topology.branches.iter().map(|b| b.input + 1).max().unwrap_or(0);
    let mut slots = vec![Vec::new(); n_slots];
    for b in &topology.branches {
        slots[b.input] = (0..b.input_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    }
    slots
}

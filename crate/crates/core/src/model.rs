//! Dense tanh MLP with a softmax cross-entropy head, hand-written gradients
//! and the client-side SGD loop.
//!
//! Parameters live in one flat [`ParamVector`]. Layers are laid out in order
//! from input to output; each layer stores its weight matrix row-major with
//! shape `fan_out x fan_in` (row `o` holds the weights feeding output unit
//! `o`), followed by its `fan_out` biases. Index `i` therefore names the same
//! scalar for every client and every round.

use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl ModelArch {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "input_dim >= 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("model.hidden_dims", "every hidden width >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "num_classes >= 2"));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);

        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }

    /// Total number of scalar parameters (weights plus biases of every layer).
    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }
}

/// Flat parameter (or parameter-update) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self - base`, coordinatewise.
    pub fn delta_from(&self, base: &ParamVector) -> Result<ParamVector> {
        check_len("ParamVector::delta_from", self.len(), base.len())?;
        Ok(ParamVector(self.0.iter().zip(&base.0).map(|(a, b)| a - b).collect()))
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 16,
            local_epochs: 5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is allowed for the learning rate so that a client can be made inert.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "optimizer.learning_rate",
                "learning_rate >= 0 and finite",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "momentum in [0,1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "weight_decay >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "batch_size >= 1"));
        }
        Ok(())
    }
}

/// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn init_model(arch: &ModelArch, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, Purpose::Init, &[]);
    let mut params = ParamVector::zeros(arch.num_params());
    for layer in arch.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        let weights = &mut params.0[layer.weight_offset..layer.bias_offset];
        for w in weights {
            *w = rng.random_range(-bound..=bound);
        }
    }
    params
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    layers: Vec<Layer>,
    /// `acts[0]` is the input, `acts[k]` the output of layer `k-1`.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(arch: &ModelArch) -> Self {
        let layers = arch.layers();
        let mut acts = vec![vec![0.0; arch.input_dim]];
        acts.extend(layers.iter().map(|l| vec![0.0; l.fan_out]));
        let deltas = layers.iter().map(|l| vec![0.0; l.fan_out]).collect();
        Self { layers, acts, deltas }
    }

    /// Fills `acts`; the last entry holds the logits.
    fn forward(&mut self, params: &[f64], x: &[f64]) {
        self.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(k + 1);
            let input = &before[k];
            let output = &mut after[0];
            let weights = &params[layer.weight_offset..layer.bias_offset];
            let biases = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
            for (o, out) in output.iter_mut().enumerate() {
                let row = &weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                let z = biases[o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                *out = if k == last { z } else { z.tanh() };
            }
        }
    }

    fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }

    /// Cross-entropy of the current logits against `label`; leaves
    /// `softmax - onehot` in the output-layer delta.
    fn loss_and_output_delta(&mut self, label: usize) -> f64 {
        let logits = self.acts.last().expect("at least one layer");
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        let out_delta = self.deltas.last_mut().expect("at least one layer");
        for (c, (d, z)) in out_delta.iter_mut().zip(logits).enumerate() {
            *d = (z - log_norm).exp() - if c == label { 1.0 } else { 0.0 };
        }
        log_norm - logits[label]
    }

    /// Adds this sample's gradient into `grad`.
    fn backward(&mut self, params: &[f64], grad: &mut [f64]) {
        for k in (0..self.layers.len()).rev() {
            let layer = self.layers[k];
            let input = &self.acts[k];
            {
                let delta = &self.deltas[k];
                for (o, &d) in delta.iter().enumerate() {
                    let row =
                        &mut grad[layer.weight_offset + o * layer.fan_in..layer.weight_offset + (o + 1) * layer.fan_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grad[layer.bias_offset + o] += d;
                }
            }
            if k > 0 {
                let (lower, upper) = self.deltas.split_at_mut(k);
                let delta = &upper[0];
                let prev = &mut lower[k - 1];
                let weights = &params[layer.weight_offset..layer.bias_offset];
                for (i, p) in prev.iter_mut().enumerate() {
                    let back: f64 = delta
                        .iter()
                        .enumerate()
                        .map(|(o, d)| weights[o * layer.fan_in + i] * d)
                        .sum();
                    let a = input[i];
                    *p = back * (1.0 - a * a);
                }
            }
        }
    }
}

fn check_batch<'a>(arch: &ModelArch, batch: impl IntoIterator<Item = &'a Sample>) -> Result<()> {
    for s in batch {
        check_len("sample features", arch.input_dim, s.features.len())?;
        if s.label >= arch.num_classes {
            return Err(Error::DimensionMismatch {
                context: "sample label (must be < num_classes)",
                expected: arch.num_classes,
                actual: s.label,
            });
        }
    }
    Ok(())
}

/// Mean loss and gradient over `batch`, written into `grad`.
fn accumulate<'a>(
    ws: &mut Workspace,
    params: &[f64],
    batch: impl ExactSizeIterator<Item = &'a Sample>,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        ws.forward(params, &s.features);
        loss += ws.loss_and_output_delta(s.label);
        ws.backward(params, grad);
    }
    grad.iter_mut().for_each(|g| *g /= n);
    loss / n
}

/// Mean cross-entropy over `batch` and its gradient.
pub fn loss_and_grad(params: &ParamVector, batch: &[Sample], arch: &ModelArch) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("loss_and_grad"));
    }
    check_len("loss_and_grad params", arch.num_params(), params.len())?;
    check_batch(arch, batch)?;
    let mut ws = Workspace::new(arch);
    let mut grad = ParamVector::zeros(params.len());
    let loss = accumulate(&mut ws, params.as_slice(), batch.iter(), grad.as_mut_slice());
    Ok((loss, grad))
}

/// Runs `local_epochs` of mini-batch SGD (momentum, coupled L2 weight decay)
/// starting from `global`.
///
/// Each epoch draws a fresh permutation from the stream keyed by
/// `(seed, epoch)`; callers fold the round and client id into `seed`. When a
/// single batch covers the whole dataset no permutation is drawn, so the
/// gradient is summed in dataset order.
pub fn local_train(
    global: &ParamVector,
    data: &[Sample],
    opt: &OptimizerConfig,
    arch: &ModelArch,
    seed: u64,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("local_train"));
    }
    opt.validate()?;
    check_len("local_train global model", arch.num_params(), global.len())?;
    check_batch(arch, data)?;

    let mut params = global.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut grad = vec![0.0; params.len()];
    let mut ws = Workspace::new(arch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let shuffle = data.len() > opt.batch_size;

    for epoch in 0..opt.local_epochs {
        if shuffle {
            order.sort_unstable();
            order.shuffle(&mut rng::stream(seed, Purpose::Shuffle, &[epoch as u64]));
        }
        for chunk in order.chunks(opt.batch_size) {
            accumulate(&mut ws, params.as_slice(), chunk.iter().map(|&i| &data[i]), &mut grad);
            for ((w, v), g) in params.0.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let g = g + opt.weight_decay * *w;
                *v = opt.momentum * *v + g;
                *w -= opt.learning_rate * *v;
            }
        }
    }

    if !params.all_finite() {
        return Err(Error::NonFinite("local_train"));
    }
    Ok(params)
}

/// Predicted class for one feature vector; ties go to the lowest class index.
pub fn predict(params: &ParamVector, features: &[f64], arch: &ModelArch) -> Result<usize> {
    check_len("predict params", arch.num_params(), params.len())?;
    check_len("predict features", arch.input_dim, features.len())?;
    let mut ws = Workspace::new(arch);
    ws.forward(params.as_slice(), features);
    Ok(argmax(ws.logits()))
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// Top-1 accuracy on `dataset`.
pub fn evaluate(params: &ParamVector, dataset: &[Sample], arch: &ModelArch) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluate"));
    }
    check_len("evaluate params", arch.num_params(), params.len())?;
    check_batch(arch, dataset)?;
    let mut ws = Workspace::new(arch);
    let correct = dataset
        .iter()
        .filter(|s| {
            ws.forward(params.as_slice(), &s.features);
            argmax(ws.logits()) == s.label
        })
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

//! Multi-layer perceptrons with `tanh` activations and the Adam optimizer.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{FenError, Result};

/// Weight (`out x in`) and bias (`1 x out`) of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameters of an MLP: `hidden_layers` affine+tanh layers followed by a
/// final affine layer without activation.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Hidden layers are drawn uniformly from `+-sqrt(1/fan_in)`; the output
    /// layer starts at exactly zero so the network initially outputs zeros.
    pub fn new<R: Rng>(in_dim: usize, hidden_width: usize, hidden_layers: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = in_dim;
        for _ in 0..hidden_layers {
            let bound = (1.0 / fan_in as f64).sqrt();
            let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
            let weight = Tensor::new(hidden_width, fan_in, draw(hidden_width * fan_in)).unwrap();
            let bias = Tensor::new(1, hidden_width, draw(hidden_width)).unwrap();
            layers.push(Layer { weight, bias });
            fan_in = hidden_width;
        }
        layers.push(Layer { weight: Tensor::zeros(out_dim, fan_in), bias: Tensor::zeros(1, out_dim) });
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.rows()).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.data().len()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Places the parameters on `graph`, as gradient-receiving leaves when
    /// `trainable`.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> Result<MlpVars> {
        let mut vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (w, b) = if trainable {
                (graph.param(layer.weight.clone())?, graph.param(layer.bias.clone())?)
            } else {
                (graph.constant(layer.weight.clone())?, graph.constant(layer.bias.clone())?)
            };
            vars.push((w, b));
        }
        Ok(MlpVars { layers: vars })
    }
}

/// Graph handles of registered MLP parameters.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Runs `input` (one sample per row) through the network.
pub fn mlp_forward(graph: &mut Graph, params: &MlpVars, input: Var) -> Result<Var> {
    let mut h = input;
    let last = params.layers.len() - 1;
    for (k, &(w, b)) in params.layers.iter().enumerate() {
        h = graph.affine(h, w, b)?;
        if k < last {
            h = graph.tanh(h)?;
        }
    }
    Ok(h)
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let second = first.clone();
        Self { config, step: 0, first, second }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(FenError::ShapeMismatch(format!(
                "adam state tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(FenError::ShapeMismatch("adam parameter/gradient shapes differ".into()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Writes tensors back to back as little-endian `f64`.
pub fn write_blob<'a, W: Write>(mut out: W, tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
    for t in tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Fills `tensors` in order from a blob written by [`write_blob`].
pub fn read_blob<'a, R: Read>(mut input: R, tensors: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
    let mut buf = [0u8; 8];
    for t in tensors {
        for v in t.data_mut() {
            input
                .read_exact(&mut buf)
                .map_err(|_| FenError::Format("parameter blob is shorter than the manifest".into()))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if input.read(&mut buf)? != 0 {
        return Err(FenError::Format("parameter blob is longer than the manifest".into()));
    }
    Ok(())
}

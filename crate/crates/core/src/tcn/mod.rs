//! Temporal convolutional networks: tensors, layers with exact reverse-mode
//! gradients, the seed builder and parameter/MAC counters.
//!
//! Activations are always 3-D `[batch, channels, time]`; fully connected
//! layers see `[batch, features, 1]`.

mod conv;
mod layers;
mod seed;

pub use conv::{conv1d_forward, Conv1d};
pub use layers::{AvgPool, BatchNorm, ChannelScale, Linear};
pub use seed::{build_seed, he_normal, SeedConfig};

use crate::quant::{ActQuant, QuantParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TcnError {
    #[error("shape error at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },
    #[error("shape error: {0}")]
    Input(String),
    #[error("backward called without a cached forward pass (layer {0})")]
    State(usize),
    #[error("config error: {0}")]
    Config(String),
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TcnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TcnError::Input(format!("shape {:?} needs {} elements, got {}", shape, n, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(n, c, t)` of a 3-D tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a 3-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub(crate) fn reshape(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }
}

/// Trainable parameter with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.zero_grad();
        }
        &mut self.grad
    }
}

/// Role of a parameter, used by optimizers and regularizers to pick targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    ChannelMask,
    DilationGate,
    PrecisionCoef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, caches kept for backward.
    Train,
    /// Running statistics in BN, caches kept for backward.
    FrozenStats,
    /// Running statistics, no caches.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Layer {
    Conv1d(Conv1d),
    BatchNorm(BatchNorm),
    ReLU {
        #[serde(skip)]
        mask: Option<Vec<bool>>,
    },
    AvgPool(AvgPool),
    Flatten {
        #[serde(skip)]
        in_shape: Option<Vec<usize>>,
    },
    Linear(Linear),
    ChannelScale(ChannelScale),
    ActQuant(ActQuant),
}

impl Layer {
    pub fn relu() -> Self {
        Layer::ReLU { mask: None }
    }

    pub fn flatten() -> Self {
        Layer::Flatten { in_shape: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv1d(_) => "conv1d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::ReLU { .. } => "relu",
            Layer::AvgPool(_) => "avgpool",
            Layer::Flatten { .. } => "flatten",
            Layer::Linear(_) => "linear",
            Layer::ChannelScale(_) => "channel_scale",
            Layer::ActQuant(_) => "act_quant",
        }
    }

    /// Output `(channels, time)` for an input of `(c, t)`.
    pub fn out_shape(&self, c: usize, t: usize) -> Result<(usize, usize), String> {
        match self {
            Layer::Conv1d(l) => {
                if c != l.c_in {
                    return Err(format!("conv expects {} input channels, got {c}", l.c_in));
                }
                Ok((l.c_out, l.out_len(t)))
            }
            Layer::BatchNorm(l) => {
                if c != l.channels() {
                    return Err(format!("batchnorm has {} channels, input has {c}", l.channels()));
                }
                Ok((c, t))
            }
            Layer::ChannelScale(l) => {
                if c != l.scale.len() {
                    return Err(format!("channel scale has {} channels, input has {c}", l.scale.len()));
                }
                Ok((c, t))
            }
            Layer::ReLU { .. } | Layer::ActQuant(_) => Ok((c, t)),
            Layer::AvgPool(p) => {
                if t < p.kernel {
                    return Err(format!("pool kernel {} longer than input {t}", p.kernel));
                }
                Ok((c, p.out_len(t)))
            }
            Layer::Flatten { .. } => Ok((c * t, 1)),
            Layer::Linear(l) => {
                if t != 1 || c != l.in_features {
                    return Err(format!("linear expects ({}, 1), got ({c}, {t})", l.in_features));
                }
                Ok((l.out_features, 1))
            }
        }
    }

    fn forward(&mut self, x: Tensor, mode: Mode, grid: Option<&QuantParams>) -> Tensor {
        match self {
            Layer::Conv1d(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::ReLU { mask } => {
                let mut x = x;
                if mode != Mode::Eval {
                    *mask = Some(x.data.iter().map(|&v| v > 0.0).collect());
                }
                x.data.iter_mut().for_each(|v| *v = v.max(0.0));
                x
            }
            Layer::AvgPool(l) => l.forward(x, mode, grid),
            Layer::Flatten { in_shape } => {
                let (n, c, t) = x.dims3();
                if mode != Mode::Eval {
                    *in_shape = Some(x.shape.clone());
                }
                x.reshape(vec![n, c * t, 1])
            }
            Layer::Linear(l) => l.forward(x, mode),
            Layer::ChannelScale(l) => l.forward(x, mode),
            Layer::ActQuant(l) => l.forward(x, mode),
        }
    }

    fn infer(&self, x: Tensor, grid: Option<&QuantParams>) -> Tensor {
        match self {
            Layer::Conv1d(l) => l.infer(&x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::ReLU { .. } => {
                let mut x = x;
                x.data.iter_mut().for_each(|v| *v = v.max(0.0));
                x
            }
            Layer::AvgPool(l) => match grid {
                Some(q) => l.infer_on_grid(&x, q),
                None => l.infer(&x),
            },
            Layer::Flatten { .. } => {
                let (n, c, t) = x.dims3();
                x.reshape(vec![n, c * t, 1])
            }
            Layer::Linear(l) => l.infer(&x),
            Layer::ChannelScale(l) => l.infer(x),
            Layer::ActQuant(l) => l.infer(x),
        }
    }

    /// Grid the layer's output lies on, given the grid of its input. Only a
    /// single-format quantizer and the pools after it produce one.
    fn output_grid(&self, input: Option<QuantParams>) -> Option<QuantParams> {
        match self {
            Layer::ActQuant(a) if a.formats.len() == 1 => a.params(a.formats[0]),
            Layer::AvgPool(_) => input,
            _ => None,
        }
    }

    fn backward(&mut self, dy: Tensor, index: usize) -> Result<Tensor, TcnError> {
        let out = match self {
            Layer::Conv1d(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::ReLU { mask } => mask.take().map(|m| {
                let mut dy = dy;
                dy.data.iter_mut().zip(m).for_each(|(g, on)| {
                    if !on {
                        *g = 0.0
                    }
                });
                dy
            }),
            Layer::AvgPool(l) => l.backward(dy),
            Layer::Flatten { in_shape } => in_shape.take().map(|s| dy.reshape(s)),
            Layer::Linear(l) => l.backward(dy),
            Layer::ChannelScale(l) => l.backward(dy),
            Layer::ActQuant(l) => l.backward(dy),
        };
        out.ok_or(TcnError::State(index))
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(ParamKind, &mut Param)) {
        match self {
            Layer::Conv1d(l) => {
                f(ParamKind::Weight, &mut l.weight);
                if let Some(b) = &mut l.bias {
                    f(ParamKind::Bias, b);
                }
                if let Some(g) = &mut l.gates {
                    f(ParamKind::DilationGate, &mut g.theta);
                }
                if let Some(q) = &mut l.wquant {
                    f(ParamKind::PrecisionCoef, &mut q.gamma);
                }
            }
            Layer::BatchNorm(l) => {
                f(ParamKind::BnGamma, &mut l.gamma);
                f(ParamKind::BnBeta, &mut l.beta);
            }
            Layer::Linear(l) => {
                f(ParamKind::Weight, &mut l.weight);
                f(ParamKind::Bias, &mut l.bias);
                if let Some(q) = &mut l.wquant {
                    f(ParamKind::PrecisionCoef, &mut q.gamma);
                }
            }
            Layer::ChannelScale(l) => f(ParamKind::ChannelMask, &mut l.scale),
            Layer::ActQuant(l) => f(ParamKind::PrecisionCoef, &mut l.delta),
            Layer::ReLU { .. } | Layer::AvgPool(_) | Layer::Flatten { .. } => {}
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        match self {
            Layer::Conv1d(l) => l.clear_cache(),
            Layer::BatchNorm(l) => l.clear_cache(),
            Layer::ReLU { mask } => *mask = None,
            Layer::AvgPool(l) => l.clear_cache(),
            Layer::Flatten { in_shape } => *in_shape = None,
            Layer::Linear(l) => l.clear_cache(),
            Layer::ChannelScale(l) => l.clear_cache(),
            Layer::ActQuant(l) => l.clear_cache(),
        }
    }
}

/// Ordered layer stack ending in a single-output fully connected layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub in_channels: usize,
    pub in_len: usize,
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(in_channels: usize, in_len: usize, layers: Vec<Layer>) -> Self {
        Self { in_channels, in_len, layers }
    }

    /// `(channels, time)` after each layer for an input of length `t`.
    pub fn shapes(&self, t: usize) -> Result<Vec<(usize, usize)>, TcnError> {
        let mut cur = (self.in_channels, t);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .out_shape(cur.0, cur.1)
                .map_err(|msg| TcnError::Shape { layer: i, msg })?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Checks adjacent shapes and that the network ends in a scalar output.
    pub fn validate(&self) -> Result<(), TcnError> {
        let shapes = self.shapes(self.in_len)?;
        match (self.final_linear(), shapes.last()) {
            (Some(_), Some(&(1, 1))) => Ok(()),
            _ => Err(TcnError::Config("network must end in a fully connected layer with one output".into())),
        }
    }

    fn final_linear(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, Layer::Linear(_)))
    }

    fn check_input(&self, x: &Tensor) -> Result<(), TcnError> {
        if x.shape().len() != 3 || x.shape()[1] != self.in_channels {
            return Err(TcnError::Input(format!(
                "network expects [n, {}, t], got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        self.shapes(x.shape()[2]).map(|_| ())
    }

    /// Batch forward. In `Train`/`FrozenStats` every layer caches what its
    /// backward pass needs.
    pub fn forward(&mut self, x: Tensor, mode: Mode) -> Result<Tensor, TcnError> {
        self.check_input(&x)?;
        if mode == Mode::Eval {
            return self.infer(x);
        }
        let mut h = x;
        let mut grid = None;
        for layer in &mut self.layers {
            h = layer.forward(h, mode, grid.as_ref());
            grid = layer.output_grid(grid);
        }
        Ok(h)
    }

    fn infer(&self, x: Tensor) -> Result<Tensor, TcnError> {
        let mut h = x;
        let mut grid = None;
        for layer in &self.layers {
            h = layer.infer(h, grid.as_ref());
            grid = layer.output_grid(grid);
        }
        Ok(h)
    }

    /// Eval-mode predictions for a `[n, c, t]` batch.
    pub fn predict(&self, x: Tensor) -> Result<Vec<f64>, TcnError> {
        self.check_input(&x)?;
        Ok(self.infer(x)?.into_data())
    }

    /// Eval-mode prediction for a single `c x t` window.
    pub fn predict_one(&self, window: &[f64]) -> Result<f64, TcnError> {
        let t = window.len() / self.in_channels.max(1);
        let x = Tensor::new(vec![1, self.in_channels, t], window.to_vec())?;
        Ok(self.predict(x)?[0])
    }

    /// Accumulate parameter gradients given d(loss)/d(prediction) per sample.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<(), TcnError> {
        let mut g = Tensor::new(vec![upstream.len(), 1, 1], upstream.to_vec())?;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(g, i)?;
        }
        Ok(())
    }

    /// Backward pass that also returns d(loss)/d(input).
    pub fn backward_input(&mut self, upstream: &[f64]) -> Result<Tensor, TcnError> {
        let mut g = Tensor::new(vec![upstream.len(), 1, 1], upstream.to_vec())?;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(g, i)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    /// Visit every trainable parameter in a stable order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamKind, &mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    /// All parameter values of the selected kinds, concatenated.
    pub fn flat_params(&mut self, keep: impl Fn(ParamKind) -> bool) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |k, p| {
            if keep(k) {
                out.extend_from_slice(&p.value)
            }
        });
        out
    }

    pub fn flat_grads(&mut self, keep: impl Fn(ParamKind) -> bool) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |k, p| {
            if keep(k) {
                let n = p.len();
                out.extend_from_slice(&p.grad_mut()[..n])
            }
        });
        out
    }

    pub fn set_flat_params(&mut self, keep: impl Fn(ParamKind) -> bool, values: &[f64]) {
        let mut off = 0;
        self.visit_params(&mut |k, p| {
            if keep(k) {
                let n = p.len();
                p.value.copy_from_slice(&values[off..off + n]);
                off += n;
            }
        });
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    /// Indices of conv and linear layers in order.
    pub fn compute_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Conv1d(_) | Layer::Linear(_)))
            .collect()
    }
}

/// Trainable parameter count: conv `c_out*c_in*k` (+ bias), linear
/// `in*out + out`, batch norm `2*channels`. Search-only parameters
/// (masks, gates, precision coefficients) are excluded.
pub fn count_params(net: &Network) -> usize {
    net.layers
        .iter()
        .map(|l| match l {
            Layer::Conv1d(c) => c.c_out * c.c_in * c.kernel + c.bias.as_ref().map_or(0, |b| b.len()),
            Layer::Linear(f) => f.in_features * f.out_features + f.out_features,
            Layer::BatchNorm(b) => 2 * b.channels(),
            _ => 0,
        })
        .sum()
}

/// Multiply-accumulates per layer (1 OP = 1 MAC); zero for non-compute layers.
pub fn layer_macs(net: &Network, input_t: usize) -> Result<Vec<usize>, TcnError> {
    let shapes = net.shapes(input_t)?;
    Ok(net
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, &(_, t_out))| match l {
            Layer::Conv1d(c) => c.c_out * t_out * c.kernel * c.c_in,
            Layer::Linear(f) => f.in_features * f.out_features,
            _ => 0,
        })
        .collect())
}

pub fn count_macs(net: &Network, input_t: usize) -> Result<usize, TcnError> {
    Ok(layer_macs(net, input_t)?.iter().sum())
}

//! Quantization-aware training and mixed-precision search on a `Network`.

use super::{argmax_format, softmax, softmax_backward, ActQuant, WeightQuant};
use crate::data::WindowSet;
use crate::tcn::{Layer, Mode, Network, ParamKind, TcnError};
use crate::train::{batch_tensor, train, TrainConfig, TrainError, TrainHook, TrainOutcome};
use serde::{Deserialize, Serialize};

/// Bit widths chosen for one conv/FC layer and its output activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPrecision {
    pub layer: usize,
    pub weight_bits: u8,
    pub act_bits: u8,
}

/// Make every batch-norm scale non-negative by flipping the sign of the
/// producing layer's output channel. The network function is unchanged, and
/// the integer fold can then use a non-negative requantization multiplier.
pub fn normalize_bn_signs(net: &mut Network) {
    for i in 1..net.layers.len() {
        let (head, tail) = net.layers.split_at_mut(i);
        let Layer::BatchNorm(bn) = &mut tail[0] else { continue };
        for c in 0..bn.channels() {
            if bn.gamma.value[c] >= 0.0 {
                continue;
            }
            match &mut head[i - 1] {
                Layer::Conv1d(conv) => {
                    let row = conv.c_in * conv.kernel;
                    conv.weight.value[c * row..(c + 1) * row].iter_mut().for_each(|w| *w = -*w);
                    if let Some(b) = &mut conv.bias {
                        b.value[c] = -b.value[c];
                    }
                }
                Layer::Linear(fc) => {
                    let row = fc.in_features;
                    fc.weight.value[c * row..(c + 1) * row].iter_mut().for_each(|w| *w = -*w);
                    fc.bias.value[c] = -fc.bias.value[c];
                }
                _ => continue,
            }
            bn.gamma.value[c] = -bn.gamma.value[c];
            bn.running_mean[c] = -bn.running_mean[c];
        }
    }
}

/// Insert fake quantization: an 8-bit quantizer on the network input, a
/// quantizer (over `formats`) after every ReLU / compute output, weight
/// quantizers (over `formats`) on every conv and FC, and an 8-bit quantizer
/// on the scalar output.
pub fn prepare_quant(net: &Network, formats: &[u8]) -> Network {
    let mut src = net.clone();
    src.clear_caches();
    normalize_bn_signs(&mut src);
    let n = src.layers.len();
    let last_compute = src.compute_layers().last().copied();
    let mut input = ActQuant::new(vec![8]);
    input.fixed = true;
    let mut layers = vec![Layer::ActQuant(input)];
    for (i, mut layer) in src.layers.into_iter().enumerate() {
        if matches!(layer, Layer::ActQuant(_)) {
            continue;
        }
        match &mut layer {
            Layer::Conv1d(c) => c.wquant = Some(WeightQuant::new(formats.to_vec())),
            Layer::Linear(l) => l.wquant = Some(WeightQuant::new(formats.to_vec())),
            _ => {}
        }
        let is_compute = matches!(layer, Layer::Conv1d(_) | Layer::Linear(_));
        let is_bn = matches!(layer, Layer::BatchNorm(_));
        let is_relu = matches!(layer, Layer::ReLU { .. });
        layers.push(layer);
        let next = net.layers.get(i + 1);
        let next_is = |f: fn(&Layer) -> bool| next.is_some_and(f);
        let ends_block = is_relu
            || (is_bn && !next_is(|l| matches!(l, Layer::ReLU { .. })))
            || (is_compute && !next_is(|l| matches!(l, Layer::BatchNorm(_) | Layer::ReLU { .. })));
        if !ends_block {
            continue;
        }
        if Some(i) == last_compute && i + 1 == n {
            let mut out = ActQuant::new(vec![8]);
            out.include_zero = false;
            out.fixed = true;
            layers.push(Layer::ActQuant(out));
        } else {
            layers.push(Layer::ActQuant(ActQuant::new(formats.to_vec())));
        }
    }
    Network::new(net.in_channels, net.in_len, layers)
}

/// Walks compute layers with the index of the quantizer on their output.
fn compute_with_output_quant(net: &Network) -> Vec<(usize, Option<usize>)> {
    let mut out = Vec::new();
    for i in net.compute_layers() {
        let q = (i + 1..net.layers.len())
            .take_while(|&j| !matches!(net.layers[j], Layer::Conv1d(_) | Layer::Linear(_)))
            .find(|&j| matches!(net.layers[j], Layer::ActQuant(_)));
        out.push((i, q));
    }
    out
}

/// Per-layer winners of the precision coefficients (ties toward more bits).
pub fn assign_precisions(net: &Network) -> Vec<LayerPrecision> {
    compute_with_output_quant(net)
        .into_iter()
        .map(|(i, q)| {
            let weight_bits = match &net.layers[i] {
                Layer::Conv1d(c) => c.wquant.as_ref(),
                Layer::Linear(l) => l.wquant.as_ref(),
                _ => None,
            }
            .map_or(8, |w| argmax_format(&w.formats, &w.gamma.value));
            let act_bits = match q.map(|j| &net.layers[j]) {
                Some(Layer::ActQuant(a)) => argmax_format(&a.formats, &a.delta.value),
                _ => 8,
            };
            LayerPrecision { layer: i, weight_bits, act_bits }
        })
        .collect()
}

/// Collapse every mixture to the given single formats.
pub fn fix_precisions(net: &mut Network, precisions: &[LayerPrecision]) {
    let pairs = compute_with_output_quant(net);
    for p in precisions {
        let Some(&(_, q)) = pairs.iter().find(|(i, _)| *i == p.layer) else { continue };
        match &mut net.layers[p.layer] {
            Layer::Conv1d(c) => c.wquant = Some(WeightQuant::new(vec![p.weight_bits])),
            Layer::Linear(l) => l.wquant = Some(WeightQuant::new(vec![p.weight_bits])),
            _ => {}
        }
        if let Some(Layer::ActQuant(a)) = q.map(|j| &mut net.layers[j]) {
            if !a.fixed {
                a.formats = vec![p.act_bits];
                a.delta = crate::tcn::Param::new(vec![0.0]);
            }
        }
    }
}

/// Expected bit cost of one layer: weights and activations weighted by
/// their softmax coefficients.
pub fn edmips_layer_cost(n_weights: usize, w_formats: &[u8], gamma: &[f64], n_acts: usize, a_formats: &[u8], delta: &[f64]) -> f64 {
    let exp_bits = |f: &[u8], c: &[f64]| softmax(c).iter().zip(f).map(|(p, &b)| p * b as f64).sum::<f64>();
    n_weights as f64 * exp_bits(w_formats, gamma) + n_acts as f64 * exp_bits(a_formats, delta)
}

/// Total expected bits over all weight and activation quantizers, with an
/// optional `scale * d(cost)` accumulated into the coefficient gradients.
fn edmips_cost_impl(net: &mut Network, grad_scale: Option<f64>) -> Result<f64, TcnError> {
    let shapes = net.shapes(net.in_len)?;
    let mut cost = 0.0;
    for (layer, &(c, t)) in net.layers.iter_mut().zip(&shapes) {
        let (formats, coef, count) = match layer {
            Layer::Conv1d(l) => match &mut l.wquant {
                Some(q) => (&q.formats, &mut q.gamma, l.weight.len()),
                None => continue,
            },
            Layer::Linear(l) => match &mut l.wquant {
                Some(q) => (&q.formats, &mut q.gamma, l.weight.len()),
                None => continue,
            },
            Layer::ActQuant(a) => (&a.formats, &mut a.delta, c * t),
            _ => continue,
        };
        let probs = softmax(&coef.value);
        let bits: Vec<f64> = formats.iter().map(|&b| count as f64 * b as f64).collect();
        cost += probs.iter().zip(&bits).map(|(p, b)| p * b).sum::<f64>();
        if let Some(s) = grad_scale {
            let d = softmax_backward(&probs, &bits);
            coef.grad_mut().iter_mut().zip(&d).for_each(|(g, v)| *g += s * v);
        }
    }
    Ok(cost)
}

pub fn edmips_cost(net: &Network) -> Result<f64, TcnError> {
    edmips_cost_impl(&mut net.clone(), None)
}

/// Gradient of [`edmips_cost`] w.r.t. every precision coefficient, in
/// parameter-visit order.
pub fn edmips_cost_grad(net: &Network) -> Result<Vec<f64>, TcnError> {
    let mut n = net.clone();
    n.zero_grad();
    edmips_cost_impl(&mut n, Some(1.0))?;
    Ok(n.flat_grads(|k| k == ParamKind::PrecisionCoef))
}

/// Training hook for QAT and precision search.
///
/// Freezes activation observers after the first epoch, keeps batch-norm
/// scales non-negative and, when `search` is set, trains the precision
/// coefficients under `lambda * edmips_cost`.
pub struct QatHook {
    pub lambda: f64,
    pub search: bool,
}

pub type EdmipsHook = QatHook;

impl TrainHook for QatHook {
    fn trainable(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::DilationGate => false,
            ParamKind::PrecisionCoef => self.search,
            _ => true,
        }
    }

    fn regularize(&mut self, net: &mut Network) -> f64 {
        if !self.search || self.lambda == 0.0 {
            return 0.0;
        }
        self.lambda * edmips_cost_impl(net, Some(self.lambda)).unwrap_or(f64::NAN)
    }

    fn after_step(&mut self, net: &mut Network) {
        for layer in &mut net.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.gamma.value.iter_mut().for_each(|g| *g = g.max(0.0));
            }
        }
    }

    fn end_epoch(&mut self, net: &mut Network, epoch: usize) {
        if epoch == 0 {
            freeze_observers(net);
        }
    }
}

pub fn freeze_observers(net: &mut Network) {
    for layer in &mut net.layers {
        if let Layer::ActQuant(a) = layer {
            a.observer.freeze();
        }
    }
}

/// Run the training set through the network once to seed activation ranges.
pub fn calibrate(net: &mut Network, ws: &WindowSet, batch_size: usize) -> Result<(), TcnError> {
    let idx: Vec<usize> = (0..ws.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        net.forward(batch_tensor(ws, chunk), Mode::FrozenStats)?;
        net.clear_caches();
    }
    Ok(())
}

/// Quantization-aware training of a prepared network. Zero epochs yields
/// post-training quantization with calibrated ranges.
pub fn qat_train(
    mut net: Network,
    train_set: &WindowSet,
    val_set: Option<&WindowSet>,
    cfg: &TrainConfig,
    hook: &mut QatHook,
) -> Result<TrainOutcome, TrainError> {
    calibrate(&mut net, train_set, cfg.batch_size)?;
    if cfg.epochs == 0 {
        freeze_observers(&mut net);
        return Ok(TrainOutcome { net, trace: vec![], best_epoch: 0 });
    }
    let mut out = train(net, train_set, val_set, cfg, hook)?;
    freeze_observers(&mut out.net);
    Ok(out)
}

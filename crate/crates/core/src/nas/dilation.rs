//! Dilation search with binarized per-tap gates that can only realize
//! power-of-two dilations.
//!
//! With `K = 2^H + 1` taps and gates `b_1..b_H`, tap `j` is alive iff every
//! gate above the 2-adic order of `j` is on:
//! `beta_j = prod_{h > l(j)} b_h`, `l(0) = H`.

use super::{CostMode, NasError};
use crate::tcn::{Conv1d, Layer, Network, Param, Tensor};
use crate::train::TrainHook;
use crate::tcn::ParamKind;
use serde::{Deserialize, Serialize};

pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilationGates {
    /// `theta[h - 1]` drives gate `b_h`.
    pub theta: Param,
    pub kernel: usize,
}

/// `H` such that `k = 2^H + 1`, if any.
pub fn gate_count(k: usize) -> Option<usize> {
    let m = k.checked_sub(1)?;
    (m >= 2 && m.is_power_of_two()).then(|| m.trailing_zeros() as usize)
}

/// 2-adic order of `j`, with `l(0) = h`.
fn order(j: usize, h: usize) -> usize {
    if j == 0 {
        h
    } else {
        (j.trailing_zeros() as usize).min(h)
    }
}

pub fn gate_binarize(theta: &[f64]) -> Vec<bool> {
    theta.iter().map(|&t| t >= BINARIZE_THRESHOLD).collect()
}

/// Straight-through pass mask: `|theta - 0.5| <= 0.5`.
pub fn gate_passes(theta: f64) -> bool {
    (theta - BINARIZE_THRESHOLD).abs() <= 0.5
}

/// Tap mask for explicit gate bits.
pub fn tap_mask_from_bits(bits: &[bool], k: usize) -> Vec<f64> {
    let h = bits.len();
    (0..k)
        .map(|j| {
            let alive = (order(j, h) + 1..=h).all(|g| bits[g - 1]);
            if alive {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Dilation realized by the gate bits: `2^max({0} u {h : b_h = 0})`.
pub fn dilation_of(bits: &[bool]) -> usize {
    let top = (1..=bits.len()).filter(|&h| !bits[h - 1]).max().unwrap_or(0);
    1 << top
}

impl DilationGates {
    pub fn new(kernel: usize) -> Result<Self, NasError> {
        let h = gate_count(kernel).ok_or_else(|| NasError::Config(format!("kernel {kernel} is not 2^H + 1")))?;
        Ok(Self { theta: Param::new(vec![1.0; h]), kernel })
    }

    pub fn bits(&self) -> Vec<bool> {
        gate_binarize(&self.theta.value)
    }

    pub fn tap_mask(&self) -> Vec<f64> {
        tap_mask_from_bits(&self.bits(), self.kernel)
    }

    pub fn dilation(&self) -> usize {
        dilation_of(&self.bits())
    }

    /// Gradient w.r.t. theta from d(loss)/d(beta_j), through the product
    /// formula on the binary gates and the clipped straight-through estimator.
    pub fn backward(&mut self, dbeta: &[f64]) {
        let bits = self.bits();
        let h = bits.len();
        let b: Vec<f64> = bits.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let mut dtheta = vec![0.0; h];
        for (j, &g) in dbeta.iter().enumerate() {
            let lo = order(j, h);
            for gate in lo + 1..=h {
                let others: f64 = (lo + 1..=h).filter(|&o| o != gate).map(|o| b[o - 1]).product();
                dtheta[gate - 1] += g * others;
            }
        }
        let pass: Vec<bool> = self.theta.value.iter().map(|&t| gate_passes(t)).collect();
        let grad = self.theta.grad_mut();
        for (i, d) in dtheta.into_iter().enumerate() {
            if pass[i] {
                grad[i] += d;
            }
        }
    }

    /// Differentiable surrogate of the alive-tap count, using
    /// `clamp(theta, 0, 1)` in place of the binary gates.
    pub fn soft_taps(&self) -> (f64, Vec<f64>) {
        let h = self.theta.len();
        let c: Vec<f64> = self.theta.value.iter().map(|t| t.clamp(0.0, 1.0)).collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; h];
        for j in 0..self.kernel {
            let lo = order(j, h);
            total += (lo + 1..=h).map(|g| c[g - 1]).product::<f64>();
            for gate in lo + 1..=h {
                let t = self.theta.value[gate - 1];
                if !(0.0..=1.0).contains(&t) {
                    continue;
                }
                grad[gate - 1] += (lo + 1..=h).filter(|&o| o != gate).map(|o| c[o - 1]).product::<f64>();
            }
        }
        (total, grad)
    }
}

/// Conv forward with the gates' tap mask applied to every filter.
pub fn masked_conv_forward(x: &Tensor, conv: &Conv1d, gates: &DilationGates) -> Result<Tensor, NasError> {
    if gate_count(conv.kernel).is_none() || gates.kernel != conv.kernel {
        return Err(NasError::Config(format!("kernel {} is not 2^H + 1 or does not match the gates", conv.kernel)));
    }
    let mut masked = conv.clone();
    masked.gates = Some(gates.clone());
    Ok(crate::tcn::conv1d_forward(x, &masked)?)
}

/// Attach fresh gates (all taps alive) to every conv with dilation 1 and a
/// `2^H + 1` kernel. Returns the number of gated layers.
pub fn attach_gates(net: &mut Network) -> usize {
    let mut n = 0;
    for layer in &mut net.layers {
        if let Layer::Conv1d(c) = layer {
            if c.dilation == 1 && gate_count(c.kernel).is_some() {
                c.gates = Some(DilationGates::new(c.kernel).expect("checked kernel"));
                n += 1;
            }
        }
    }
    n
}

/// Per-tap cost weight of a gated conv: weights per tap, times output
/// length for the ops mode.
fn tap_weight(c: &Conv1d, t_out: usize, mode: CostMode) -> f64 {
    let per_tap = (c.c_in * c.c_out) as f64;
    match mode {
        CostMode::Size => per_tap,
        CostMode::Ops => per_tap * t_out as f64,
    }
}

/// `sum_layers w_layer * sum_j beta~_j` and its gradient w.r.t. each
/// layer's theta (in layer order).
pub fn pit_cost(net: &Network, mode: CostMode) -> Result<(f64, Vec<Vec<f64>>), NasError> {
    let shapes = net.shapes(net.in_len)?;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for (layer, &(_, t)) in net.layers.iter().zip(&shapes) {
        if let Layer::Conv1d(c) = layer {
            if let Some(g) = &c.gates {
                let w = tap_weight(c, t, mode);
                let (taps, grad) = g.soft_taps();
                total += w * taps;
                grads.push(grad.into_iter().map(|v| v * w).collect());
            }
        }
    }
    Ok((total, grads))
}

/// Replace every gated conv by an explicit dilated conv holding only the
/// alive taps `0, d, 2d, ..., K - 1`.
pub fn extract_dilation(net: &Network) -> Network {
    let mut out = net.clone();
    out.clear_caches();
    for layer in &mut out.layers {
        let Layer::Conv1d(c) = layer else { continue };
        let Some(g) = c.gates.take() else { continue };
        let d = g.dilation();
        let k_new = (c.kernel - 1) / d + 1;
        let mut w = Vec::with_capacity(c.c_out * c.c_in * k_new);
        for row in c.weight.value.chunks_exact(c.kernel) {
            w.extend((0..k_new).map(|i| row[i * d]));
        }
        let mut conv = Conv1d::from_weights(c.c_in, c.c_out, k_new, c.dilation * d, c.stride, w);
        conv.bias = c.bias.take();
        conv.wquant = c.wquant.take();
        *c = conv;
    }
    out
}

/// Dilation-search regularizer: trains the gate parameters under
/// `lambda * pit_cost`.
pub struct PitHook {
    pub lambda: f64,
    pub mode: CostMode,
    /// Learning-rate multiplier for the gate parameters.
    pub gate_lr_scale: f64,
}

impl TrainHook for PitHook {
    fn trainable(&self, kind: ParamKind) -> bool {
        kind != ParamKind::PrecisionCoef
    }

    fn lr_scale(&self, kind: ParamKind) -> f64 {
        if kind == ParamKind::DilationGate {
            self.gate_lr_scale
        } else {
            1.0
        }
    }

    fn regularize(&mut self, net: &mut Network) -> f64 {
        let Ok((cost, grads)) = pit_cost(net, self.mode) else { return f64::NAN };
        let mut it = grads.into_iter();
        for layer in &mut net.layers {
            if let Layer::Conv1d(c) = layer {
                if let Some(g) = &mut c.gates {
                    let grad = it.next().expect("one gradient per gated layer");
                    g.theta.grad_mut().iter_mut().zip(grad).for_each(|(a, b)| *a += self.lambda * b);
                }
            }
        }
        self.lambda * cost
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gates(theta: &[f64]) -> DilationGates {
        DilationGates { theta: Param::new(theta.to_vec()), kernel: (1 << theta.len()) + 1 }
    }

    fn alive(m: &[f64]) -> Vec<usize> {
        m.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect()
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(gate_binarize(&[0.9, 0.2, 0.7]), vec![true, false, true]);
        assert!(gate_binarize(&[0.5, 1.0, 3.0]).iter().all(|&b| b));
        assert!(gate_passes(0.6));
        assert!(!gate_passes(2.0));
    }

    #[test]
    fn tap_sets() {
        assert_eq!(alive(&gates(&[0.0, 1.0, 1.0]).tap_mask()), vec![0, 2, 4, 6, 8]);
        assert_eq!(alive(&gates(&[1.0, 0.0, 1.0]).tap_mask()), vec![0, 4, 8]);
        assert_eq!(alive(&gates(&[0.0, 0.0, 1.0]).tap_mask()), vec![0, 4, 8]);
        assert_eq!(alive(&gates(&[1.0, 1.0, 0.0]).tap_mask()), vec![0, 8]);
        assert_eq!(gates(&[1.0, 1.0, 0.0]).dilation(), 8);
        assert_eq!(gates(&[1.0; 3]).dilation(), 1);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(gates(&[1.0; 3]).soft_taps().0, 9.0);
        assert_eq!(gates(&[0.0, 1.0, 1.0]).soft_taps().0, 5.0);
    }

    #[test]
    fn gate_gradient_clipped() {
        let mut g = gates(&[0.6, 2.0, 1.0]);
        g.backward(&[1.0; 9]);
        assert!(g.theta.grad[0] != 0.0);
        assert_eq!(g.theta.grad[1], 0.0);
    }

    #[test]
    fn rejects_bad_kernel() {
        assert!(DilationGates::new(8).is_err());
        assert!(DilationGates::new(3).is_ok());
        assert!(DilationGates::new(2).is_err());
    }
}

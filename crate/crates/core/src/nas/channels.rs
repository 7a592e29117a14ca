//! Channel-count search: per-output-channel masks (batch-norm scales, or a
//! dedicated `ChannelScale` where no batch norm follows), a cost-weighted
//! group-L1 regularizer, pruning extraction and uniform expansion.

use super::{CostMode, NasError};
use crate::numerics::Rng64;
use crate::tcn::{he_normal, BatchNorm, ChannelScale, Conv1d, Layer, Linear, Network, Param, ParamKind};
use crate::train::TrainHook;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnConfig {
    pub lambda: f64,
    pub tau: f64,
    pub omega: f64,
    pub cost_mode: CostMode,
    pub mask_lr_scale: f64,
}

impl Default for MnConfig {
    fn default() -> Self {
        Self { lambda: 0.0, tau: 1e-2, omega: 1.0, cost_mode: CostMode::Size, mask_lr_scale: 10.0 }
    }
}

impl MnConfig {
    pub fn validate(&self) -> Result<(), NasError> {
        if !(self.lambda >= 0.0 && self.tau > 0.0 && self.omega >= 1.0 && self.mask_lr_scale > 0.0) {
            return Err(NasError::Config(format!(
                "need lambda >= 0, tau > 0, omega >= 1 (got {}, {}, {})",
                self.lambda, self.tau, self.omega
            )));
        }
        Ok(())
    }
}

/// A masked producer (conv or FC) and the layer holding its mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSite {
    pub producer: usize,
    pub mask: usize,
}

/// Every conv and every FC except the final one, paired with the batch norm
/// or channel scale right after it.
pub fn mask_sites(net: &Network) -> Vec<MaskSite> {
    let compute = net.compute_layers();
    let Some((_, body)) = compute.split_last() else { return vec![] };
    body.iter()
        .filter(|&&i| matches!(net.layers.get(i + 1), Some(Layer::BatchNorm(_) | Layer::ChannelScale(_))))
        .map(|&i| MaskSite { producer: i, mask: i + 1 })
        .collect()
}

/// Insert a unit `ChannelScale` after each maskable producer lacking a batch
/// norm. Returns how many were inserted.
pub fn attach_channel_masks(net: &mut Network) -> usize {
    let compute = net.compute_layers();
    let Some((_, body)) = compute.split_last() else { return 0 };
    let mut inserted = 0;
    for &i in body.iter().rev() {
        if matches!(net.layers.get(i + 1), Some(Layer::BatchNorm(_) | Layer::ChannelScale(_))) {
            continue;
        }
        let c = out_channels(&net.layers[i]);
        net.layers.insert(i + 1, Layer::ChannelScale(ChannelScale::ones(c)));
        inserted += 1;
    }
    inserted
}

fn out_channels(layer: &Layer) -> usize {
    match layer {
        Layer::Conv1d(c) => c.c_out,
        Layer::Linear(l) => l.out_features,
        _ => 0,
    }
}

fn mask_param(layer: &Layer) -> &Param {
    match layer {
        Layer::BatchNorm(bn) => &bn.gamma,
        Layer::ChannelScale(s) => &s.scale,
        _ => unreachable!("mask site must hold a batch norm or channel scale"),
    }
}

fn mask_param_mut(layer: &mut Layer) -> &mut Param {
    match layer {
        Layer::BatchNorm(bn) => &mut bn.gamma,
        Layer::ChannelScale(s) => &mut s.scale,
        _ => unreachable!("mask site must hold a batch norm or channel scale"),
    }
}

/// Cost of one output channel of a producer: weights per channel, times
/// output length in the ops mode.
pub fn channel_cost_weight(layer: &Layer, t_out: usize, mode: CostMode) -> f64 {
    let per = match layer {
        Layer::Conv1d(c) => (c.c_in * c.kernel) as f64,
        Layer::Linear(l) => l.in_features as f64,
        _ => 0.0,
    };
    match mode {
        CostMode::Size => per,
        CostMode::Ops => per * t_out as f64,
    }
}

pub fn group_l1(weight: f64, gamma: &[f64]) -> f64 {
    weight * gamma.iter().map(|g| g.abs()).sum::<f64>()
}

/// `sum_layers w_layer * sum_i |gamma_i|` over all mask sites.
pub fn mn_cost(net: &Network, mode: CostMode) -> Result<f64, NasError> {
    let shapes = net.shapes(net.in_len)?;
    Ok(mask_sites(net)
        .iter()
        .map(|s| {
            let w = channel_cost_weight(&net.layers[s.producer], shapes[s.producer].1, mode);
            group_l1(w, &mask_param(&net.layers[s.mask]).value)
        })
        .sum())
}

/// Channel-search regularizer: adds `lambda * w * sign(gamma)` to the mask
/// gradients (zero subgradient at zero).
pub struct MnHook {
    pub lambda: f64,
    pub mode: CostMode,
    /// Learning-rate multiplier for the masks. Adam moves a parameter by
    /// about `lr` per step, too slow to drive unit masks to zero otherwise.
    pub mask_lr_scale: f64,
}

impl TrainHook for MnHook {
    fn lr_scale(&self, kind: ParamKind) -> f64 {
        if matches!(kind, ParamKind::BnGamma | ParamKind::ChannelMask) {
            self.mask_lr_scale
        } else {
            1.0
        }
    }

    fn regularize(&mut self, net: &mut Network) -> f64 {
        if self.lambda == 0.0 {
            return 0.0;
        }
        let Ok(shapes) = net.shapes(net.in_len) else { return f64::NAN };
        let mut cost = 0.0;
        for s in mask_sites(net) {
            let w = channel_cost_weight(&net.layers[s.producer], shapes[s.producer].1, self.mode);
            let p = mask_param_mut(&mut net.layers[s.mask]);
            cost += group_l1(w, &p.value);
            let n = p.len();
            for i in 0..n {
                let g = p.value[i];
                let sign = if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
                p.grad_mut()[i] += self.lambda * w * sign;
            }
        }
        self.lambda * cost
    }
}

/// Surviving channels of one mask: `|gamma| > tau`, else the largest one.
pub fn kept_channels(gamma: &[f64], tau: f64) -> Vec<usize> {
    let keep: Vec<usize> = (0..gamma.len()).filter(|&i| gamma[i].abs() > tau).collect();
    if !keep.is_empty() || gamma.is_empty() {
        return keep;
    }
    let best = (0..gamma.len()).max_by(|&a, &b| gamma[a].abs().total_cmp(&gamma[b].abs()).then(b.cmp(&a))).unwrap();
    vec![best]
}

fn slice_conv(c: &Conv1d, rows: &[usize], cols: &[usize]) -> Conv1d {
    let k = c.kernel;
    let mut w = Vec::with_capacity(rows.len() * cols.len() * k);
    for &r in rows {
        for &ci in cols {
            let base = (r * c.c_in + ci) * k;
            w.extend_from_slice(&c.weight.value[base..base + k]);
        }
    }
    let mut out = Conv1d::from_weights(cols.len(), rows.len(), k, c.dilation, c.stride, w);
    out.bias = c.bias.as_ref().map(|b| Param::new(rows.iter().map(|&r| b.value[r]).collect()));
    out.gates = c.gates.clone();
    out.wquant = c.wquant.clone();
    out
}

fn slice_linear(l: &Linear, rows: &[usize], cols: &[usize]) -> Linear {
    let mut w = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        w.extend(cols.iter().map(|&ci| l.weight.value[r * l.in_features + ci]));
    }
    let bias = rows.iter().map(|&r| l.bias.value[r]).collect();
    let mut out = Linear::from_weights(cols.len(), rows.len(), w, bias);
    out.wquant = l.wquant.clone();
    out
}

fn slice_bn(bn: &BatchNorm, keep: &[usize]) -> BatchNorm {
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let mut out = BatchNorm::new(keep.len());
    out.gamma = Param::new(pick(&bn.gamma.value));
    out.beta = Param::new(pick(&bn.beta.value));
    out.running_mean = pick(&bn.running_mean);
    out.running_var = pick(&bn.running_var);
    out.eps = bn.eps;
    out.momentum = bn.momentum;
    out
}

/// Remove channels whose mask magnitude is at most `tau`, shrinking the
/// consumers' inputs to match. Surviving values are copied unchanged.
/// Channel scales are folded into their producers.
pub fn extract_arch(net: &Network, tau: f64) -> Result<Network, NasError> {
    let shapes = net.shapes(net.in_len)?;
    let sites = mask_sites(net);
    let keep_for = |i: usize| {
        sites.iter().find(|s| s.producer == i).map(|s| kept_channels(&mask_param(&net.layers[s.mask]).value, tau))
    };
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut kept_in: Vec<usize> = (0..net.in_channels).collect();
    for (i, layer) in net.layers.iter().enumerate() {
        let all = |n: usize| (0..n).collect::<Vec<usize>>();
        let new = match layer {
            Layer::Conv1d(c) => {
                let rows = keep_for(i).unwrap_or_else(|| all(c.c_out));
                let mut conv = slice_conv(c, &rows, &kept_in);
                if let Some(Layer::ChannelScale(s)) = net.layers.get(i + 1) {
                    let k = c.kernel * conv.c_in;
                    for (r, &orig) in rows.iter().enumerate() {
                        conv.weight.value[r * k..(r + 1) * k].iter_mut().for_each(|w| *w *= s.scale.value[orig]);
                    }
                }
                kept_in = rows;
                Layer::Conv1d(conv)
            }
            Layer::Linear(l) => {
                let rows = keep_for(i).unwrap_or_else(|| all(l.out_features));
                let mut fc = slice_linear(l, &rows, &kept_in);
                if let Some(Layer::ChannelScale(s)) = net.layers.get(i + 1) {
                    let k = fc.in_features;
                    for (r, &orig) in rows.iter().enumerate() {
                        let sv = s.scale.value[orig];
                        fc.weight.value[r * k..(r + 1) * k].iter_mut().for_each(|w| *w *= sv);
                        fc.bias.value[r] *= sv;
                    }
                }
                kept_in = rows;
                Layer::Linear(fc)
            }
            Layer::BatchNorm(bn) => Layer::BatchNorm(slice_bn(bn, &kept_in)),
            Layer::ChannelScale(_) => continue,
            Layer::Flatten { .. } => {
                let t = if i == 0 { net.in_len } else { shapes[i - 1].1 };
                kept_in = kept_in.iter().flat_map(|&c| (0..t).map(move |s| c * t + s)).collect();
                Layer::flatten()
            }
            Layer::ReLU { .. } => Layer::relu(),
            other => {
                let mut l = other.clone();
                l.clear_cache();
                l
            }
        };
        layers.push(new);
    }
    let out = Network::new(net.in_channels, net.in_len, layers);
    out.validate()?;
    Ok(out)
}

/// Multiply every masked layer's width by `omega` (rounded up). New
/// producer rows are He-normal, new batch-norm channels start at identity,
/// and consumers get zero weights for the new inputs, so the network
/// function is unchanged until training.
pub fn expand_uniform(net: &Network, omega: f64, rng: &mut Rng64) -> Result<Network, NasError> {
    if !(omega >= 1.0) {
        return Err(NasError::Config(format!("omega must be >= 1, got {omega}")));
    }
    let shapes = net.shapes(net.in_len)?;
    let sites = mask_sites(net);
    let mut out = net.clone();
    out.clear_caches();
    // (old channels, new channels) of the current activation
    let mut width: Option<(usize, usize)> = None;
    for i in 0..out.layers.len() {
        let is_site = sites.iter().any(|s| s.producer == i);
        match &mut out.layers[i] {
            Layer::Conv1d(c) => {
                let c_in = width.map_or(c.c_in, |w| w.1);
                let c_out = if is_site { (c.c_out as f64 * omega).ceil() as usize } else { c.c_out };
                let fan_in = c_in * c.kernel;
                let fresh = he_normal(c_out * c_in * c.kernel, fan_in, rng);
                let mut w = vec![0.0; c_out * c_in * c.kernel];
                for r in 0..c_out {
                    for ci in 0..c_in {
                        let dst = (r * c_in + ci) * c.kernel;
                        for j in 0..c.kernel {
                            w[dst + j] = if r < c.c_out && ci < c.c_in {
                                c.weight.value[(r * c.c_in + ci) * c.kernel + j]
                            } else if r >= c.c_out {
                                fresh[dst + j]
                            } else {
                                0.0
                            };
                        }
                    }
                }
                let mut conv = Conv1d::from_weights(c_in, c_out, c.kernel, c.dilation, c.stride, w);
                conv.bias = c.bias.as_ref().map(|b| {
                    let mut v = b.value.clone();
                    v.resize(c_out, 0.0);
                    Param::new(v)
                });
                width = Some((c.c_out, c_out));
                *c = conv;
            }
            Layer::Linear(l) => {
                let in_new = width.map_or(l.in_features, |w| w.1);
                let out_new = if is_site { (l.out_features as f64 * omega).ceil() as usize } else { l.out_features };
                let fresh = he_normal(out_new * in_new, in_new, rng);
                let mut w = vec![0.0; out_new * in_new];
                for r in 0..out_new {
                    for ci in 0..in_new {
                        w[r * in_new + ci] = if r < l.out_features && ci < l.in_features {
                            l.weight.value[r * l.in_features + ci]
                        } else if r >= l.out_features {
                            fresh[r * in_new + ci]
                        } else {
                            0.0
                        };
                    }
                }
                let mut bias = l.bias.value.clone();
                bias.resize(out_new, 0.0);
                let mut fc = Linear::from_weights(in_new, out_new, w, bias);
                fc.wquant = l.wquant.clone();
                width = Some((l.out_features, out_new));
                *l = fc;
            }
            Layer::BatchNorm(bn) => {
                let n = width.map_or(bn.channels(), |w| w.1);
                let mut grown = BatchNorm::new(n);
                let old = bn.channels();
                grown.gamma.value[..old].copy_from_slice(&bn.gamma.value);
                grown.beta.value[..old].copy_from_slice(&bn.beta.value);
                grown.running_mean[..old].copy_from_slice(&bn.running_mean);
                grown.running_var[..old].copy_from_slice(&bn.running_var);
                *bn = grown;
            }
            Layer::ChannelScale(s) => {
                let n = width.map_or(s.scale.len(), |w| w.1);
                let mut grown = ChannelScale::ones(n);
                let old = s.scale.len();
                grown.scale.value[..old].copy_from_slice(&s.scale.value);
                *s = grown;
            }
            Layer::Flatten { .. } => {
                // channel-major flattening appends the new channels' features
                let t = if i == 0 { net.in_len } else { shapes[i - 1].1 };
                width = width.map(|(o, n)| (o * t, n * t));
            }
            _ => {}
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcn::{build_seed, count_params, SeedConfig};

    #[test]
    fn cost_examples() {
        assert_eq!(group_l1(10.0, &[0.5, -0.3]), 8.0);
        assert_eq!(group_l1(10.0, &[0.0, 0.0]), 0.0);
        assert_eq!(group_l1(20.0, &[0.5, -0.3]), 16.0);
    }

    #[test]
    fn keep_rule() {
        assert_eq!(kept_channels(&[0.5, 0.0, 0.3], 0.01), vec![0, 2]);
        assert_eq!(kept_channels(&[0.001, -0.005, 0.002], 0.01), vec![1]);
    }

    #[test]
    fn seed_sites_skip_last_fc() {
        let net = build_seed(&SeedConfig::tiny(), 0);
        let sites = mask_sites(&net);
        assert_eq!(sites.len(), net.compute_layers().len() - 1);
    }

    #[test]
    fn identity_extraction_and_expansion() {
        let net = build_seed(&SeedConfig::tiny(), 0);
        let ext = extract_arch(&net, 1e-2).unwrap();
        assert_eq!(count_params(&ext), count_params(&net));
        let same = expand_uniform(&net, 1.0, &mut Rng64::new(1)).unwrap();
        assert_eq!(count_params(&same), count_params(&net));
        let wide = expand_uniform(&net, 2.0, &mut Rng64::new(1)).unwrap();
        match &wide.layers[0] {
            Layer::Conv1d(c) => assert_eq!(c.c_out, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn attach_inserts_scales_where_no_bn() {
        let mut rng = Rng64::new(0);
        let mut net = Network::new(
            2,
            8,
            vec![
                Layer::Conv1d(Conv1d::new(2, 3, 3, 1, 1, &mut rng)),
                Layer::relu(),
                Layer::flatten(),
                Layer::Linear(Linear::new(24, 1, &mut rng)),
            ],
        );
        assert_eq!(attach_channel_masks(&mut net), 1);
        assert!(matches!(net.layers[1], Layer::ChannelScale(_)));
        net.validate().unwrap();
    }
}

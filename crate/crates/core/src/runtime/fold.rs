//! Folding a fake-quantized float network into an integer model.

use super::{pack, LayerKind, QLayer, QModel, RuntimeError};
use crate::quant::{argmax_format, ActQuant, QuantParams, WeightQuant};
use crate::tcn::{Layer, Network};

/// Smallest running variance a BN channel may have and still be folded.
const MIN_VAR: f64 = 1e-12;

/// Largest `sh <= 31` with `round(scale * 2^sh) < 2^31`, as `(M, sh)`.
pub fn choose_multiplier(scale: f64) -> Option<(i32, u8)> {
    if !(scale.is_finite() && scale >= 0.0) {
        return None;
    }
    for sh in (0..=31u8).rev() {
        let m = (scale * (1u64 << sh) as f64).round();
        if m < (1u64 << 31) as f64 {
            return Some((m as i32, sh));
        }
    }
    None
}

fn act_params(q: &ActQuant, layer: usize) -> Result<QuantParams, RuntimeError> {
    let bits = argmax_format(&q.formats, &q.delta.value);
    q.params(bits)
        .map(|p| p.to_f32_grid())
        .ok_or_else(|| RuntimeError::Fold { layer, msg: "activation quantizer has no observed range".into() })
}

struct Compute<'a> {
    c_in: usize,
    c_out: usize,
    k: usize,
    d: usize,
    s: usize,
    linear: bool,
    weight: &'a [f64],
    bias: Option<&'a [f64]>,
    wquant: Option<&'a WeightQuant>,
}

/// Build the integer model from a network prepared for quantization.
///
/// Expected pattern: `ActQuant` on the input, then per compute layer
/// `conv|linear [BN] [ReLU] ActQuant`, with average pools and flatten in
/// between. BN gammas must be non-negative (run sign normalization first).
pub fn from_network(net: &Network) -> Result<QModel, RuntimeError> {
    let fold_err = |layer: usize, msg: &str| RuntimeError::Fold { layer, msg: msg.into() };
    let Some(Layer::ActQuant(inq)) = net.layers.first() else {
        return Err(fold_err(0, "network must start with an activation quantizer"));
    };
    let mut cur = act_params(inq, 0)?;
    let mut channels = net.in_channels;
    let mut layers = Vec::new();
    let mut i = 1;
    while i < net.layers.len() {
        let compute = match &net.layers[i] {
            Layer::Conv1d(c) => {
                if c.gates.is_some() {
                    return Err(fold_err(i, "dilation gates must be extracted before folding"));
                }
                Compute {
                    c_in: c.c_in,
                    c_out: c.c_out,
                    k: c.kernel,
                    d: c.dilation,
                    s: c.stride,
                    linear: false,
                    weight: &c.weight.value,
                    bias: c.bias.as_ref().map(|b| b.value.as_slice()),
                    wquant: c.wquant.as_ref(),
                }
            }
            Layer::Linear(l) => Compute {
                c_in: l.in_features,
                c_out: l.out_features,
                k: 1,
                d: 1,
                s: 1,
                linear: true,
                weight: &l.weight.value,
                bias: Some(&l.bias.value),
                wquant: l.wquant.as_ref(),
            },
            Layer::AvgPool(p) => {
                layers.push(QLayer {
                    kind: LayerKind::AvgPool,
                    weight_bits: 0,
                    act_bits: cur.bits,
                    c_in: channels,
                    c_out: channels,
                    k: p.kernel,
                    d: 1,
                    s: p.stride,
                    in_q: cur,
                    out_q: cur,
                    z_w: 0,
                    bias: vec![],
                    mult: vec![],
                    shift: vec![],
                    weights: pack(&[], 8)?,
                });
                i += 1;
                continue;
            }
            Layer::Flatten { .. } => {
                i += 1;
                continue;
            }
            _ => return Err(fold_err(i, "unexpected layer outside a conv/linear group")),
        };
        let start = i;
        i += 1;
        let mut affine = None;
        if let Some(Layer::BatchNorm(bn)) = net.layers.get(i) {
            if bn.channels() != compute.c_out {
                return Err(fold_err(i, "batch norm width differs from the producer"));
            }
            if bn.running_var.iter().any(|&v| v < MIN_VAR) {
                return Err(fold_err(i, "batch norm running variance is ~0"));
            }
            affine = Some(bn.eval_affine());
            i += 1;
        }
        let relu = matches!(net.layers.get(i), Some(Layer::ReLU { .. }));
        if relu {
            i += 1;
        }
        let Some(Layer::ActQuant(oq)) = net.layers.get(i) else {
            return Err(fold_err(start, "compute layer is not followed by an activation quantizer"));
        };
        let out_q = act_params(oq, i)?;
        i += 1;
        layers.push(fold_compute(&compute, affine, relu, cur, out_q, start)?);
        channels = compute.c_out;
        cur = out_q;
    }
    let model = QModel { layers };
    model.validate()?;
    Ok(model)
}

fn fold_compute(
    c: &Compute,
    affine: Option<(Vec<f64>, Vec<f64>)>,
    relu: bool,
    in_q: QuantParams,
    out_q: QuantParams,
    layer: usize,
) -> Result<QLayer, RuntimeError> {
    let w_bits = c.wquant.map_or(8, |q| argmax_format(&q.formats, &q.gamma.value));
    let w_q = WeightQuant::params_for(c.weight, w_bits).to_f32_grid();
    let z_w = w_q.zero_point() as i32;
    let mut codes: Vec<u8> = c.weight.iter().map(|&w| w_q.quantize(w) as u8).collect();
    let (scale, shift) = affine.unwrap_or_else(|| (vec![1.0; c.c_out], vec![0.0; c.c_out]));
    let (eps_x, eps_w, eps_o) = (in_q.eps(), w_q.eps(), out_q.eps());
    let z_o = out_q.zero_point();
    // exact output offset when the output grid does not contain zero
    let offset = -out_q.alpha - z_o as f64 * eps_o;
    let row = c.c_in * c.k;
    let bound = (row as i64) * in_q.max_code() * w_q.max_code();
    let mut bias = Vec::with_capacity(c.c_out);
    let mut mult = Vec::with_capacity(c.c_out);
    let mut shifts = Vec::with_capacity(c.c_out);
    for ch in 0..c.c_out {
        let a = scale[ch];
        if a < 0.0 {
            return Err(RuntimeError::Fold { layer, msg: format!("negative batch norm scale on channel {ch}") });
        }
        let b = a * c.bias.map_or(0.0, |v| v[ch]) + shift[ch] + offset;
        let unit = a * eps_x * eps_w;
        let real_scale = unit / eps_o;
        let folded = (unit > 0.0).then(|| (b / unit).round()).and_then(|bi| {
            let (m, sh) = choose_multiplier(real_scale)?;
            (m > 0 && bound + (bi.abs() as i64) < 1i64 << 31 && bi.abs() < 2f64.powi(31)).then_some((bi as i32, m, sh))
        });
        let (bi, m, sh) = match folded {
            Some(v) => v,
            None => {
                // constant channel: zero the weights, emit the bias directly
                codes[ch * row..(ch + 1) * row].iter_mut().for_each(|v| *v = z_w as u8);
                let limit = (4 * out_q.max_code()) as f64;
                ((b / eps_o).round().clamp(-limit, limit) as i32, 1, 0)
            }
        };
        bias.push(bi);
        mult.push(m);
        shifts.push(sh);
    }
    let kind = match (c.linear, relu) {
        (false, false) => LayerKind::Conv,
        (false, true) => LayerKind::ConvRelu,
        (true, false) => LayerKind::Linear,
        (true, true) => LayerKind::LinearRelu,
    };
    Ok(QLayer {
        kind,
        weight_bits: w_bits,
        act_bits: out_q.bits,
        c_in: c.c_in,
        c_out: c.c_out,
        k: c.k,
        d: c.d,
        s: c.s,
        in_q,
        out_q,
        z_w,
        bias,
        mult,
        shift: shifts,
        weights: pack(&codes, w_bits)?,
    })
}

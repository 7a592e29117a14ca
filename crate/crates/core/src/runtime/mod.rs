//! Integer-only inference on packed sub-byte weights.
//!
//! Every conv/FC layer computes
//! `acc = bias[c] + sum (x - z_x) * (w - z_w)` in i32 and requantizes with
//! `code = clamp(((acc * M[c] + 2^(sh[c]-1)) >> sh[c]) + z_out, 0, 2^bits - 1)`.

mod fold;
mod format;
mod pack;

pub use fold::{choose_multiplier, from_network};
pub use format::{export_model, import_model, model_bytes, LAYER_HEADER_BYTES, MODEL_HEADER_BYTES};
pub use pack::{pack, packed_len, unpack, PackedTensor};

use crate::quant::QuantParams;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RuntimeError {
    #[error("value out of range: {0}")]
    Range(String),
    #[error("model format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("cannot fold layer {layer}: {msg}")]
    Fold { layer: usize, msg: String },
    #[error("input shape error: {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv = 0,
    ConvRelu = 1,
    Linear = 2,
    LinearRelu = 3,
    AvgPool = 4,
}

impl LayerKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => LayerKind::Conv,
            1 => LayerKind::ConvRelu,
            2 => LayerKind::Linear,
            3 => LayerKind::LinearRelu,
            4 => LayerKind::AvgPool,
            _ => return None,
        })
    }

    pub fn is_compute(self) -> bool {
        self != LayerKind::AvgPool
    }

    pub fn relu(self) -> bool {
        matches!(self, LayerKind::ConvRelu | LayerKind::LinearRelu)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::LinearRelu)
    }
}

/// One integer layer. Pooling layers carry no weights or per-channel data
/// and keep their input quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct QLayer {
    pub kind: LayerKind,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub d: usize,
    pub s: usize,
    pub in_q: QuantParams,
    pub out_q: QuantParams,
    pub z_w: i32,
    pub bias: Vec<i32>,
    /// Per-channel requantization multiplier and shift.
    pub mult: Vec<i32>,
    pub shift: Vec<u8>,
    pub weights: PackedTensor,
}

impl QLayer {
    pub fn n_weights(&self) -> usize {
        if self.kind.is_compute() {
            self.c_out * self.c_in * self.k
        } else {
            0
        }
    }

    /// Worst-case accumulator magnitude without the bias.
    pub fn acc_bound(&self) -> i64 {
        let a = (1i64 << self.in_q.bits) - 1;
        let w = (1i64 << self.weight_bits) - 1;
        (self.k * self.c_in) as i64 * a * w
    }

    pub fn out_len(&self, t: usize) -> usize {
        match self.kind {
            LayerKind::Conv | LayerKind::ConvRelu => t.div_ceil(self.s),
            LayerKind::Linear | LayerKind::LinearRelu => 1,
            LayerKind::AvgPool => (t - self.k) / self.s + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct QModel {
    pub layers: Vec<QLayer>,
}

impl QModel {
    /// Checks every invariant the runtime relies on.
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |i: usize, msg: String| Err(RuntimeError::Invalid(format!("layer {i}: {msg}")));
        if self.layers.is_empty() {
            return Err(RuntimeError::Invalid("model has no layers".into()));
        }
        if !self.layers.last().unwrap().kind.is_compute() {
            return Err(RuntimeError::Invalid("model must end in a compute layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.c_in == 0 || l.c_out == 0 || l.k == 0 || l.d == 0 || l.s == 0 {
                return bad(i, "zero dimension".into());
            }
            if l.act_bits != l.out_q.bits {
                return bad(i, "act_bits does not match the output quantizer".into());
            }
            if i > 0 && self.layers[i - 1].out_q != l.in_q {
                return bad(i, "input quantizer differs from the previous output".into());
            }
            if !l.kind.is_compute() {
                if l.c_in != l.c_out || l.in_q != l.out_q || !l.bias.is_empty() || l.weights.len != 0 {
                    return bad(i, "pooling layer must be shape- and quantizer-preserving".into());
                }
                continue;
            }
            if !matches!(l.weight_bits, 2 | 4 | 8) || l.weights.bits != l.weight_bits {
                return bad(i, format!("unsupported weight width {}", l.weight_bits));
            }
            if l.kind.is_linear() && (l.k != 1 || l.d != 1 || l.s != 1) {
                return bad(i, "fully connected layers have k = d = s = 1".into());
            }
            if l.weights.len != l.n_weights() || l.weights.bytes.len() != packed_len(l.n_weights(), l.weight_bits) {
                return bad(i, "weight count does not match the geometry".into());
            }
            if l.z_w < 0 || l.z_w as i64 > (1i64 << l.weight_bits) - 1 {
                return bad(i, format!("weight zero point {} out of range", l.z_w));
            }
            if l.bias.len() != l.c_out || l.mult.len() != l.c_out || l.shift.len() != l.c_out {
                return bad(i, "per-channel vectors must have c_out entries".into());
            }
            if l.mult.iter().any(|&m| m < 0) || l.shift.iter().any(|&s| s > 31) {
                return bad(i, "requantization multiplier must be >= 0 and shift <= 31".into());
            }
            let max_bias = l.bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
            if l.acc_bound() + max_bias >= 1i64 << 31 {
                return bad(i, "accumulator could overflow 32 bits".into());
            }
            if i > 0 && !l.kind.is_linear() && self.layers[i - 1].c_out != l.c_in {
                return bad(i, "channel count differs from the previous layer".into());
            }
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.c_in)
    }
}

/// `clamp(((acc * m + 2^(sh-1)) >> sh) + z_out, 0, 2^bits - 1)`, 64-bit
/// intermediate; no rounding term when `sh = 0`.
pub fn requantize(acc: i32, m: i32, sh: u8, z_out: i32, bits: u8) -> i32 {
    let prod = acc as i64 * m as i64;
    let round = if sh == 0 { 0 } else { 1i64 << (sh - 1) };
    let v = ((prod + round) >> sh) + z_out as i64;
    v.clamp(0, (1i64 << bits) - 1) as i32
}

/// Integer forward pass on one `c x t` window (row-major, real valued).
/// Returns the dequantized scalar output.
pub fn run_inference(model: &QModel, x: &[f64]) -> Result<f64, RuntimeError> {
    let trace = run_trace(model, x)?;
    let codes = trace.last().unwrap();
    if codes.len() != 1 {
        return Err(RuntimeError::Shape(format!("model produced {} outputs, expected 1", codes.len())));
    }
    Ok(model.layers.last().unwrap().out_q.dequantize(codes[0] as i64))
}

/// Output codes of every layer, channel-major.
pub fn run_trace(model: &QModel, x: &[f64]) -> Result<Vec<Vec<i32>>, RuntimeError> {
    let first = model.layers.first().ok_or_else(|| RuntimeError::Invalid("empty model".into()))?;
    let c0 = first.c_in;
    if first.kind.is_linear() {
        if x.len() != c0 {
            return Err(RuntimeError::Shape(format!("expected {c0} inputs, got {}", x.len())));
        }
    } else if x.is_empty() || x.len() % c0 != 0 {
        return Err(RuntimeError::Shape(format!("input length {} is not a multiple of {c0}", x.len())));
    }
    let mut t = if first.kind.is_linear() { 1 } else { x.len() / c0 };
    let mut codes: Vec<i32> = x.iter().map(|&v| first.in_q.quantize(v) as i32).collect();
    let mut c = c0;
    let mut trace = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let (next, c_next, t_next) = match l.kind {
            LayerKind::AvgPool => {
                if t < l.k {
                    return Err(RuntimeError::Shape(format!("layer {i}: pool kernel longer than input")));
                }
                let t_out = l.out_len(t);
                let mut out = vec![0i32; c * t_out];
                let half = (l.k / 2) as i32;
                for ch in 0..c {
                    for o in 0..t_out {
                        let s: i32 = codes[ch * t + o * l.s..ch * t + o * l.s + l.k].iter().sum();
                        out[ch * t_out + o] = (s + half) / l.k as i32;
                    }
                }
                (out, c, t_out)
            }
            _ => {
                let (c_in, t_in) = if l.kind.is_linear() { (c * t, 1) } else { (c, t) };
                if c_in != l.c_in {
                    return Err(RuntimeError::Shape(format!("layer {i} expects {} inputs, got {c_in}", l.c_in)));
                }
                compute_layer(l, &codes, t_in)
            }
        };
        trace.push(next.clone());
        codes = next;
        c = c_next;
        t = t_next;
    }
    Ok(trace)
}

fn compute_layer(l: &QLayer, x: &[i32], t_in: usize) -> (Vec<i32>, usize, usize) {
    let w: Vec<i32> = unpack(&l.weights).into_iter().map(|v| v as i32 - l.z_w).collect();
    let z_x = l.in_q.zero_point() as i32;
    let z_o = l.out_q.zero_point() as i32;
    let xs: Vec<i32> = x.iter().map(|&v| v - z_x).collect();
    let t_out = if l.kind.is_linear() { 1 } else { t_in.div_ceil(l.s) };
    let mut out = vec![0i32; l.c_out * t_out];
    for co in 0..l.c_out {
        for t in 0..t_out {
            let mut acc = l.bias[co];
            for ci in 0..l.c_in {
                let wrow = &w[(co * l.c_in + ci) * l.k..(co * l.c_in + ci + 1) * l.k];
                let xrow = &xs[ci * t_in..(ci + 1) * t_in];
                for (i, &wv) in wrow.iter().enumerate() {
                    // padded positions read (z_x - z_x) = 0
                    if let Some(src) = (t * l.s).checked_sub(l.d * i) {
                        acc += xrow[src] * wv;
                    }
                }
            }
            let mut code = requantize(acc, l.mult[co], l.shift[co], z_o, l.act_bits);
            if l.kind.relu() {
                code = code.max(z_o);
            }
            out[co * t_out + t] = code;
        }
    }
    (out, l.c_out, t_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(0, 12345, 7, 0, 8), 0);
        assert_eq!(requantize(5, 1 << 10, 10, 0, 8), 5);
        assert_eq!(requantize(3, 1, 1, 0, 8), 2);
        assert_eq!(requantize(1000, 1, 0, 0, 8), 255);
        assert_eq!(requantize(-7, 1, 0, 3, 4), 0);
    }

    fn constant_model(bias_bpm: f64) -> QModel {
        let in_q = QuantParams::from_range(-3.0, 3.0, 8).unwrap().to_f32_grid();
        let out_q = QuantParams::spanning(40.0, 200.0, 8).unwrap().to_f32_grid();
        let bias = (bias_bpm / out_q.eps()).round() as i32;
        QModel {
            layers: vec![QLayer {
                kind: LayerKind::Linear,
                weight_bits: 8,
                act_bits: 8,
                c_in: 8,
                c_out: 1,
                k: 1,
                d: 1,
                s: 1,
                in_q,
                out_q,
                z_w: 3,
                bias: vec![bias],
                mult: vec![1],
                shift: vec![0],
                weights: pack(&[3; 8], 8).unwrap(),
            }],
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let m = constant_model(70.0);
        m.validate().unwrap();
        let eps = m.layers[0].out_q.eps();
        for x in [[0.0; 8], [1.5; 8], [-2.0; 8]] {
            let y = run_inference(&m, &x).unwrap();
            assert!((y - 70.0).abs() <= eps, "{y}");
        }
    }

    #[test]
    fn export_round_trip() {
        let m = constant_model(90.0);
        let bytes = export_model(&m).unwrap();
        assert_eq!(bytes.len(), model_bytes(&m));
        assert_eq!(&bytes[..4], b"QPPG");
        assert_eq!(import_model(&bytes).unwrap(), m);
        let err = import_model(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, RuntimeError::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(import_model(&bad).unwrap_err(), RuntimeError::Format { offset: 0, msg: "bad magic".into() });
    }

    #[test]
    fn overflow_guard_rejects() {
        let mut m = constant_model(90.0);
        m.layers[0].bias[0] = i32::MAX - 10;
        assert!(matches!(m.validate(), Err(RuntimeError::Invalid(_))));
    }
}

//! Little-endian binary model file.
//!
//! ```text
//! "QPPG" u16 version u16 n_layers
//! per layer:
//!   u8 kind, u8 weight_bits, u8 act_bits, u16 c_in, c_out, k, d, s,
//!   f32 in_alpha, f32 in_beta, u8 in_bits, f32 out_alpha, f32 out_beta, u8 out_bits,
//!   i32 z_w
//!   compute layers only: c_out x (i32 bias, i32 M, u8 sh), packed weights
//! ```

use super::{packed_len, LayerKind, PackedTensor, QLayer, QModel, RuntimeError};
use crate::quant::QuantParams;

pub const MAGIC: &[u8; 4] = b"QPPG";
pub const VERSION: u16 = 1;
pub const MODEL_HEADER_BYTES: usize = 8;
pub const LAYER_HEADER_BYTES: usize = 35;

fn put_q(out: &mut Vec<u8>, q: &QuantParams) {
    out.extend((q.alpha as f32).to_le_bytes());
    out.extend((q.beta as f32).to_le_bytes());
    out.push(q.bits);
}

fn dim(v: usize, what: &str) -> Result<u16, RuntimeError> {
    u16::try_from(v).map_err(|_| RuntimeError::Invalid(format!("{what} = {v} does not fit in u16")))
}

pub fn export_model(model: &QModel) -> Result<Vec<u8>, RuntimeError> {
    model.validate()?;
    let mut out = Vec::with_capacity(model_bytes(model));
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(dim(model.layers.len(), "layer count")?.to_le_bytes());
    for l in &model.layers {
        out.extend([l.kind as u8, l.weight_bits, l.act_bits]);
        for (v, what) in [(l.c_in, "c_in"), (l.c_out, "c_out"), (l.k, "k"), (l.d, "d"), (l.s, "s")] {
            out.extend(dim(v, what)?.to_le_bytes());
        }
        put_q(&mut out, &l.in_q);
        put_q(&mut out, &l.out_q);
        out.extend(l.z_w.to_le_bytes());
        if l.kind.is_compute() {
            for c in 0..l.c_out {
                out.extend(l.bias[c].to_le_bytes());
                out.extend(l.mult[c].to_le_bytes());
                out.push(l.shift[c]);
            }
            out.extend(&l.weights.bytes);
        }
    }
    Ok(out)
}

/// Exact size of the exported file.
pub fn model_bytes(model: &QModel) -> usize {
    MODEL_HEADER_BYTES
        + model
            .layers
            .iter()
            .map(|l| {
                let extra = if l.kind.is_compute() { 9 * l.c_out + packed_len(l.n_weights(), l.weight_bits) } else { 0 };
                LAYER_HEADER_BYTES + extra
            })
            .sum::<usize>()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> RuntimeError {
        RuntimeError::Format { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], RuntimeError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, RuntimeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, RuntimeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, RuntimeError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, RuntimeError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn quant(&mut self) -> Result<QuantParams, RuntimeError> {
        let at = self.pos;
        let (a, b, bits) = (self.f32()?, self.f32()?, self.u8()?);
        QuantParams::new(a as f64, b as f64, bits)
            .map_err(|e| RuntimeError::Format { offset: at, msg: format!("bad quantizer: {e}") })
    }
}

pub fn import_model(buf: &[u8]) -> Result<QModel, RuntimeError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(RuntimeError::Format { offset: 0, msg: "bad magic".into() });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(RuntimeError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let n = r.u16()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let kind = LayerKind::from_u8(r.u8()?).ok_or_else(|| RuntimeError::Format { offset: at, msg: "unknown layer kind".into() })?;
        let (weight_bits, act_bits) = (r.u8()?, r.u8()?);
        let (c_in, c_out, k, d, s) =
            (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
        let (in_q, out_q) = (r.quant()?, r.quant()?);
        let z_w = r.i32()?;
        let mut layer = QLayer {
            kind,
            weight_bits,
            act_bits,
            c_in,
            c_out,
            k,
            d,
            s,
            in_q,
            out_q,
            z_w,
            bias: vec![],
            mult: vec![],
            shift: vec![],
            weights: PackedTensor { bits: 8, len: 0, bytes: vec![] },
        };
        if kind.is_compute() {
            if !matches!(weight_bits, 2 | 4 | 8) {
                return Err(RuntimeError::Format { offset: at + 1, msg: format!("unsupported weight width {weight_bits}") });
            }
            for _ in 0..c_out {
                layer.bias.push(r.i32()?);
                layer.mult.push(r.i32()?);
                layer.shift.push(r.u8()?);
            }
            let nw = layer.n_weights();
            let bytes = r.take(packed_len(nw, weight_bits))?.to_vec();
            layer.weights = PackedTensor { bits: weight_bits, len: nw, bytes };
        }
        layers.push(layer);
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let model = QModel { layers };
    model.validate()?;
    Ok(model)
}

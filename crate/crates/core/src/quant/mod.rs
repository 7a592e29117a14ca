//! Affine quantization, fake-quant layers and mixed-precision meta-layers.
//!
//! `code = clamp(round((t - alpha) / eps), 0, 2^N - 1)`, `t^ = alpha + code * eps`.
//! Rounding is half away from zero.

mod qat;

pub use qat::{
    assign_precisions, calibrate, edmips_cost, edmips_cost_grad, edmips_layer_cost, fix_precisions, freeze_observers,
    normalize_bn_signs, prepare_quant, qat_train, EdmipsHook, LayerPrecision, QatHook,
};

use crate::tcn::{Mode, Param, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bit widths supported by the integer runtime.
pub const FORMATS: [u8; 3] = [2, 4, 8];

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("invalid quantizer: {0}")]
    Params(String),
    #[error("observer is frozen")]
    Frozen,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub alpha: f64,
    pub beta: f64,
    pub bits: u8,
}

impl QuantParams {
    pub fn new(alpha: f64, beta: f64, bits: u8) -> Result<Self, QuantError> {
        if !FORMATS.contains(&bits) {
            return Err(QuantError::Params(format!("unsupported bit width {bits}")));
        }
        if !(alpha.is_finite() && beta.is_finite() && beta > alpha) {
            return Err(QuantParams::bad_range(alpha, beta));
        }
        Ok(Self { alpha, beta, bits })
    }

    fn bad_range(alpha: f64, beta: f64) -> QuantError {
        QuantError::Params(format!("range [{alpha}, {beta}] is empty or not finite"))
    }

    /// Range covering `[lo, hi]` and zero, nudged so that zero is exactly
    /// representable (`alpha = -z * eps`).
    pub fn from_range(lo: f64, hi: f64, bits: u8) -> Result<Self, QuantError> {
        let lo = lo.min(0.0);
        let mut hi = hi.max(0.0);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(QuantParams::bad_range(lo, hi));
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let levels = max_code(bits) as f64;
        let eps = (hi - lo) / levels;
        let z = (-lo / eps).round();
        let alpha = -z * eps;
        Self::new(alpha, alpha + levels * eps, bits)
    }

    /// Plain `[lo, hi]` range, zero not forced in.
    pub fn spanning(lo: f64, hi: f64, bits: u8) -> Result<Self, QuantError> {
        if hi - lo < 1e-12 {
            return Self::new(lo - 0.5, lo + 0.5, bits);
        }
        Self::new(lo, hi, bits)
    }

    pub fn max_code(&self) -> i64 {
        max_code(self.bits)
    }

    pub fn eps(&self) -> f64 {
        (self.beta - self.alpha) / self.max_code() as f64
    }

    pub fn zero_point(&self) -> i64 {
        (-self.alpha / self.eps()).round() as i64
    }

    pub fn quantize(&self, t: f64) -> i64 {
        let c = ((t - self.alpha) / self.eps()).round();
        c.clamp(0.0, self.max_code() as f64) as i64
    }

    pub fn dequantize(&self, code: i64) -> f64 {
        self.alpha + code as f64 * self.eps()
    }

    pub fn fake_quant(&self, t: f64) -> f64 {
        self.dequantize(self.quantize(t))
    }

    /// Straight-through mask: gradient passes where `alpha <= t <= beta`.
    pub fn passes(&self, t: f64) -> bool {
        t >= self.alpha && t <= self.beta
    }

    /// Same quantizer with alpha/beta stored as f32, as in the model file.
    pub fn to_f32_grid(&self) -> Self {
        Self { alpha: self.alpha as f32 as f64, beta: self.beta as f32 as f64, bits: self.bits }
    }
}

pub fn max_code(bits: u8) -> i64 {
    (1i64 << bits) - 1
}

pub fn quantize(t: &[f64], q: &QuantParams) -> Vec<i64> {
    t.iter().map(|&v| q.quantize(v)).collect()
}

pub fn dequantize(codes: &[i64], q: &QuantParams) -> Vec<f64> {
    codes.iter().map(|&c| q.dequantize(c)).collect()
}

pub fn fake_quant(t: &[f64], q: &QuantParams) -> Vec<f64> {
    t.iter().map(|&v| q.fake_quant(v)).collect()
}

/// Running min/max. Without a momentum the range is the union of every
/// observed batch; with one, batch extremes are exponentially smoothed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeObserver {
    pub min: f64,
    pub max: f64,
    pub momentum: Option<f64>,
    pub seen: bool,
    pub frozen: bool,
}

impl Default for RangeObserver {
    fn default() -> Self {
        Self { min: 0.0, max: 0.0, momentum: None, seen: false, frozen: false }
    }
}

impl RangeObserver {
    pub fn observe(&mut self, t: &[f64]) -> Result<(), QuantError> {
        if self.frozen {
            return Err(QuantError::Frozen);
        }
        if t.is_empty() {
            return Ok(());
        }
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !self.seen {
            self.min = lo;
            self.max = hi;
            self.seen = true;
        } else if let Some(m) = self.momentum {
            self.min = m * self.min + (1.0 - m) * lo;
            self.max = m * self.max + (1.0 - m) * hi;
        } else {
            self.min = self.min.min(lo);
            self.max = self.max.max(hi);
        }
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        self.seen.then_some((self.min, self.max))
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Backward through softmax: `dv_k = p_k (g_k - sum_p p_p g_p)`.
pub(crate) fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pk, gk)| pk * (gk - dot)).collect()
}

/// Index of the largest coefficient; ties go to the format with more bits.
pub fn argmax_format(formats: &[u8], coef: &[f64]) -> u8 {
    let mut best = 0;
    for i in 1..formats.len() {
        let better = coef[i] > coef[best] || (coef[i] == coef[best] && formats[i] > formats[best]);
        if better {
            best = i;
        }
    }
    formats[best]
}

/// Mixture of fake-quantized copies of one shared float weight tensor.
/// With a single format it is plain per-tensor fake quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightQuant {
    pub formats: Vec<u8>,
    pub gamma: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WqCache {
    probs: Vec<f64>,
    paths: Vec<Vec<f64>>,
}

impl WeightQuant {
    pub fn new(formats: Vec<u8>) -> Self {
        assert!(!formats.is_empty(), "at least one format");
        let n = formats.len();
        Self { formats, gamma: Param::new(vec![0.0; n]) }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.gamma.value)
    }

    /// Per-format quantizer for the current weights.
    pub fn params_for(w: &[f64], bits: u8) -> QuantParams {
        let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if w.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        QuantParams::from_range(lo, hi, bits).expect("finite weights")
    }

    pub fn forward(&self, w: &[f64]) -> (Vec<f64>, WqCache) {
        let probs = self.probs();
        let paths: Vec<Vec<f64>> = self.formats.iter().map(|&b| fake_quant(w, &Self::params_for(w, b))).collect();
        let mut out = vec![0.0; w.len()];
        for (p, path) in probs.iter().zip(&paths) {
            out.iter_mut().zip(path).for_each(|(o, v)| *o += p * v);
        }
        (out, WqCache { probs, paths })
    }

    /// Accumulates the coefficient gradient. The weight gradient passes
    /// through unchanged: the range always covers the tensor, so the
    /// straight-through mask is all ones and the mixture weights sum to 1.
    pub fn backward(&mut self, dw: &[f64], cache: &WqCache) {
        if self.formats.len() < 2 {
            return;
        }
        let g: Vec<f64> = cache.paths.iter().map(|p| p.iter().zip(dw).map(|(a, b)| a * b).sum()).collect();
        let d = softmax_backward(&cache.probs, &g);
        self.gamma.grad_mut().iter_mut().zip(&d).for_each(|(a, b)| *a += b);
    }
}

/// Activation fake quantization with an observed range, optionally a
/// softmax-weighted mixture over several formats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub formats: Vec<u8>,
    pub delta: Param,
    pub observer: RangeObserver,
    /// Whether the range is forced to include zero (true everywhere except
    /// the network output).
    pub include_zero: bool,
    /// Formats fixed by the flow (network input and output) are never searched.
    pub fixed: bool,
    #[serde(skip)]
    cache: Option<AqCache>,
}

#[derive(Clone, Debug, PartialEq)]
struct AqCache {
    probs: Vec<f64>,
    paths: Vec<Vec<f64>>,
    masks: Vec<Vec<bool>>,
}

impl ActQuant {
    pub fn new(formats: Vec<u8>) -> Self {
        assert!(!formats.is_empty(), "at least one format");
        let n = formats.len();
        Self {
            formats,
            delta: Param::new(vec![0.0; n]),
            observer: RangeObserver::default(),
            include_zero: true,
            fixed: false,
            cache: None,
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.delta.value)
    }

    pub fn params(&self, bits: u8) -> Option<QuantParams> {
        let (lo, hi) = self.observer.range()?;
        let q = if self.include_zero {
            QuantParams::from_range(lo, hi, bits)
        } else {
            QuantParams::spanning(lo, hi, bits)
        };
        q.ok()
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn mix(&self, x: &Tensor, with_masks: bool) -> Option<(Tensor, AqCache)> {
        self.observer.range()?;
        let probs = self.probs();
        let mut out = Tensor::zeros(x.shape().to_vec());
        let mut paths = Vec::new();
        let mut masks = Vec::new();
        for (&b, &p) in self.formats.iter().zip(&probs) {
            let q = self.params(b)?;
            let path = fake_quant(x.data(), &q);
            out.data_mut().iter_mut().zip(&path).for_each(|(o, v)| *o += p * v);
            if with_masks {
                masks.push(x.data().iter().map(|&v| q.passes(v)).collect());
                paths.push(path);
            }
        }
        Some((out, AqCache { probs, paths, masks }))
    }

    pub(crate) fn infer(&self, x: Tensor) -> Tensor {
        match self.mix(&x, false) {
            Some((y, _)) => y,
            None => x,
        }
    }

    pub(crate) fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        if mode != Mode::Eval && !self.observer.frozen {
            self.observer.observe(x.data()).expect("observer not frozen");
        }
        if mode == Mode::Eval {
            return self.infer(x);
        }
        match self.mix(&x, true) {
            Some((y, cache)) => {
                self.cache = Some(cache);
                y
            }
            None => {
                self.cache = Some(AqCache { probs: vec![], paths: vec![], masks: vec![] });
                x
            }
        }
    }

    pub(crate) fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let cache = self.cache.take()?;
        if cache.probs.is_empty() {
            return Some(dy);
        }
        let mut dx = Tensor::zeros(dy.shape().to_vec());
        for (p, m) in cache.probs.iter().zip(&cache.masks) {
            for ((d, g), on) in dx.data_mut().iter_mut().zip(dy.data()).zip(m) {
                if *on {
                    *d += p * g;
                }
            }
        }
        if self.formats.len() > 1 {
            let g: Vec<f64> = cache.paths.iter().map(|p| p.iter().zip(dy.data()).map(|(a, b)| a * b).sum()).collect();
            let d = softmax_backward(&cache.probs, &g);
            self.delta.grad_mut().iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        Some(dx)
    }
}

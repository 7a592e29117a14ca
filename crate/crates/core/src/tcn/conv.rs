//! Causal dilated 1-D convolution.
//!
//! `y[m][t] = sum_i sum_l x[l][t*s - d*i] * w[m][l][i]`, with reads at
//! negative time returning zero (left padding of `(k-1)*d`).

use super::{Mode, Param, TcnError, Tensor};
use crate::nas::dilation::DilationGates;
use crate::numerics::Rng64;
use crate::quant::{WeightQuant, WqCache};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    /// `[c_out][c_in][kernel]`
    pub weight: Param,
    pub bias: Option<Param>,
    /// Time-step masks used during dilation search.
    pub gates: Option<DilationGates>,
    /// Fake-quantization of the weights during QAT / precision search.
    pub wquant: Option<WeightQuant>,
    #[serde(skip)]
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvCache {
    input: Tensor,
    w_eff: Vec<f64>,
    taps: Option<Vec<f64>>,
    wq: Option<WqCache>,
}

impl Conv1d {
    /// He-normal initialised, bias-free convolution.
    pub fn new(c_in: usize, c_out: usize, kernel: usize, dilation: usize, stride: usize, rng: &mut Rng64) -> Self {
        let weight = super::he_normal(c_out * c_in * kernel, c_in * kernel, rng);
        Self::from_weights(c_in, c_out, kernel, dilation, stride, weight)
    }

    pub fn from_weights(c_in: usize, c_out: usize, kernel: usize, dilation: usize, stride: usize, weight: Vec<f64>) -> Self {
        assert!(dilation >= 1 && stride >= 1 && kernel >= 1, "conv geometry must be positive");
        assert_eq!(weight.len(), c_out * c_in * kernel, "conv weight length");
        Self {
            c_in,
            c_out,
            kernel,
            dilation,
            stride,
            weight: Param::new(weight),
            bias: None,
            gates: None,
            wquant: None,
            cache: None,
        }
    }

    pub fn out_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Weights after tap masking and fake quantization.
    pub fn effective_weights(&self) -> Vec<f64> {
        self.effective().0
    }

    fn effective(&self) -> (Vec<f64>, Option<Vec<f64>>, Option<WqCache>) {
        let mut w = self.weight.value.clone();
        let mut taps = None;
        if let Some(g) = &self.gates {
            let beta = g.tap_mask();
            for row in w.chunks_exact_mut(self.kernel) {
                row.iter_mut().zip(&beta).for_each(|(v, b)| *v *= b);
            }
            taps = Some(beta);
        }
        let mut wq = None;
        if let Some(q) = &self.wquant {
            let (fq, cache) = q.forward(&w);
            w = fq;
            wq = Some(cache);
        }
        (w, taps, wq)
    }

    fn run(&self, x: &Tensor, w: &[f64]) -> Tensor {
        let (n, c_in, t_in) = x.dims3();
        let t_out = self.out_len(t_in);
        let mut y = Tensor::zeros(vec![n, self.c_out, t_out]);
        for b in 0..n {
            let xb = &x.data()[b * c_in * t_in..(b + 1) * c_in * t_in];
            let yb = &mut y.data_mut()[b * self.c_out * t_out..(b + 1) * self.c_out * t_out];
            conv_sample(xb, t_in, w, self.c_in, self.c_out, self.kernel, self.dilation, self.stride, yb, t_out);
        }
        if let Some(bias) = &self.bias {
            for row in y.data_mut().chunks_exact_mut(t_out).enumerate() {
                let bv = bias.value[row.0 % self.c_out];
                row.1.iter_mut().for_each(|v| *v += bv);
            }
        }
        y
    }

    pub(crate) fn infer(&self, x: &Tensor) -> Tensor {
        let (w, ..) = self.effective();
        self.run(x, &w)
    }

    pub(crate) fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let (w_eff, taps, wq) = self.effective();
        let y = self.run(&x, &w_eff);
        if mode != Mode::Eval {
            self.cache = Some(ConvCache { input: x, w_eff, taps, wq });
        }
        y
    }

    pub(crate) fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let cache = self.cache.take()?;
        let w_eff = &cache.w_eff;
        let (n, c_in, t_in) = cache.input.dims3();
        let (_, c_out, t_out) = dy.dims3();
        let mut dx = Tensor::zeros(vec![n, c_in, t_in]);
        let mut dw = vec![0.0; w_eff.len()];
        for b in 0..n {
            let xb = &cache.input.data()[b * c_in * t_in..(b + 1) * c_in * t_in];
            let dyb = &dy.data()[b * c_out * t_out..(b + 1) * c_out * t_out];
            let dxb = &mut dx.data_mut()[b * c_in * t_in..(b + 1) * c_in * t_in];
            conv_sample_backward(
                xb, t_in, w_eff, self.c_in, self.c_out, self.kernel, self.dilation, self.stride, dyb, t_out, dxb,
                &mut dw,
            );
        }
        if let Some(bias) = &mut self.bias {
            let g = bias.grad_mut();
            for (r, row) in dy.data().chunks_exact(t_out).enumerate() {
                g[r % c_out] += row.iter().sum::<f64>();
            }
        }
        // through fake quantization (straight-through on the weights)
        if let (Some(q), Some(wc)) = (&mut self.wquant, &cache.wq) {
            q.backward(&dw, wc);
        }
        // through the tap mask
        if let (Some(gates), Some(beta)) = (&mut self.gates, &cache.taps) {
            let raw = &self.weight.value;
            let mut dbeta = vec![0.0; self.kernel];
            for (i, (g, w)) in dw.iter_mut().zip(raw).enumerate() {
                let j = i % self.kernel;
                dbeta[j] += *g * w;
                *g *= beta[j];
            }
            gates.backward(&dbeta);
        }
        self.weight.grad_mut().iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
        Some(dx)
    }
}

/// Single-sample causal convolution into a zeroed `y` (`c_out x t_out`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_sample(
    x: &[f64],
    t_in: usize,
    w: &[f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    d: usize,
    s: usize,
    y: &mut [f64],
    t_out: usize,
) {
    for co in 0..c_out {
        let yrow = &mut y[co * t_out..(co + 1) * t_out];
        for ci in 0..c_in {
            let xrow = &x[ci * t_in..(ci + 1) * t_in];
            let wrow = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            for (i, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let off = i * d;
                let t0 = off.div_ceil(s);
                if t0 >= t_out {
                    continue;
                }
                if s == 1 {
                    for (yv, xv) in yrow[t0..].iter_mut().zip(&xrow[..t_out - t0]) {
                        *yv += wv * xv;
                    }
                } else {
                    for (t, yv) in yrow.iter_mut().enumerate().skip(t0) {
                        *yv += wv * xrow[t * s - off];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_sample_backward(
    x: &[f64],
    t_in: usize,
    w: &[f64],
    c_in: usize,
    c_out: usize,
    k: usize,
    d: usize,
    s: usize,
    dy: &[f64],
    t_out: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    for co in 0..c_out {
        let dyrow = &dy[co * t_out..(co + 1) * t_out];
        for ci in 0..c_in {
            let xrow = &x[ci * t_in..(ci + 1) * t_in];
            let base = (co * c_in + ci) * k;
            for i in 0..k {
                let off = i * d;
                let t0 = off.div_ceil(s);
                if t0 >= t_out {
                    continue;
                }
                let wv = w[base + i];
                let mut acc = 0.0;
                let dxrow = &mut dx[ci * t_in..(ci + 1) * t_in];
                if s == 1 {
                    for ((g, xv), dxv) in dyrow[t0..].iter().zip(&xrow[..t_out - t0]).zip(&mut dxrow[..t_out - t0]) {
                        acc += g * xv;
                        *dxv += wv * g;
                    }
                } else {
                    for (t, g) in dyrow.iter().enumerate().skip(t0) {
                        let src = t * s - off;
                        acc += g * xrow[src];
                        dxrow[src] += wv * g;
                    }
                }
                dw[base + i] += acc;
            }
        }
    }
}

/// Convolve a `[c_in, t]` or `[n, c_in, t]` tensor with `conv`'s effective
/// weights. Output keeps the rank of the input.
pub fn conv1d_forward(x: &Tensor, conv: &Conv1d) -> Result<Tensor, TcnError> {
    let batched = match x.shape().len() {
        2 => Tensor::new(vec![1, x.shape()[0], x.shape()[1]], x.data().to_vec())?,
        3 => x.clone(),
        _ => return Err(TcnError::Input(format!("conv input must be 2-D or 3-D, got {:?}", x.shape()))),
    };
    let (_, c, _) = batched.dims3();
    if c != conv.c_in {
        return Err(TcnError::Input(format!("conv expects {} input channels, got {c}", conv.c_in)));
    }
    if conv.weight.len() != conv.c_out * conv.c_in * conv.kernel {
        return Err(TcnError::Input("conv weight length does not match its geometry".into()));
    }
    let y = conv.infer(&batched);
    if x.shape().len() == 2 {
        let (_, co, t) = y.dims3();
        return Ok(y.reshape(vec![co, t]));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(w: Vec<f64>, c_in: usize, c_out: usize, k: usize, d: usize, s: usize) -> Conv1d {
        Conv1d::from_weights(c_in, c_out, k, d, s, w)
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(vec![1, 5], vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap();
        let y = conv1d_forward(&x, &conv(vec![1.0], 1, 1, 1, 1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilated_two_tap_example() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv1d_forward(&x, &conv(vec![1.0, 1.0], 1, 1, 2, 2, 1)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_weights_zero_output() {
        let x = Tensor::new(vec![2, 6], (0..12).map(|v| v as f64).collect()).unwrap();
        let y = conv1d_forward(&x, &conv(vec![0.0; 2 * 3 * 3], 2, 3, 3, 2, 2)).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_output_length() {
        let c = conv(vec![1.0; 3], 1, 1, 3, 1, 4);
        assert_eq!(c.out_len(256), 64);
        assert_eq!(c.out_len(10), 3);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = Tensor::new(vec![3, 4], vec![0.0; 12]).unwrap();
        assert!(conv1d_forward(&x, &conv(vec![1.0; 2], 2, 1, 1, 1, 1)).is_err());
    }
}

use super::{Mode, Param, Tensor};
use crate::numerics::Rng64;
use crate::quant::{QuantParams, WeightQuant, WqCache};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    #[serde(skip)]
    cache: Option<BnCache>,
}

#[derive(Clone, Debug, PartialEq)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Per-channel `(scale, shift)` of the eval-mode affine map.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let a = self.gamma.value[c] / (self.running_var[c] + self.eps).sqrt();
            scale.push(a);
            shift.push(self.beta.value[c] - a * self.running_mean[c]);
        }
        (scale, shift)
    }

    pub(crate) fn infer(&self, mut x: Tensor) -> Tensor {
        let (_, c, t) = x.dims3();
        let (scale, shift) = self.eval_affine();
        for (r, row) in x.data_mut().chunks_exact_mut(t).enumerate() {
            let ch = r % c;
            row.iter_mut().for_each(|v| *v = scale[ch] * *v + shift[ch]);
        }
        x
    }

    pub(crate) fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let (n, c, t) = x.dims3();
        let batch_stats = mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let m = (n * t) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (r, row) in x.data().chunks_exact(t).enumerate() {
                mean[r % c] += row.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for (r, row) in x.data().chunks_exact(t).enumerate() {
                let mu = mean[r % c];
                var[r % c] += row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= m);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x;
        for (r, row) in xhat.data_mut().chunks_exact_mut(t).enumerate() {
            let ch = r % c;
            row.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
        let mut y = xhat.clone();
        for (r, row) in y.data_mut().chunks_exact_mut(t).enumerate() {
            let ch = r % c;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            row.iter_mut().for_each(|v| *v = g * *v + b);
        }
        self.cache = Some(BnCache { xhat, inv_std, batch_stats });
        y
    }

    pub(crate) fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let cache = self.cache.take()?;
        let (n, c, t) = dy.dims3();
        let m = (n * t) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (r, (g, xh)) in dy.data().chunks_exact(t).zip(cache.xhat.data().chunks_exact(t)).enumerate() {
            let ch = r % c;
            dbeta[ch] += g.iter().sum::<f64>();
            dgamma[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut dx = dy;
        for (r, (g, xh)) in dx.data_mut().chunks_exact_mut(t).zip(cache.xhat.data().chunks_exact(t)).enumerate() {
            let ch = r % c;
            let gam = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            if cache.batch_stats {
                // dx = g*inv_std/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                let (sd, sdx) = (dbeta[ch], dgamma[ch]);
                for (gv, xv) in g.iter_mut().zip(xh) {
                    *gv = gam * is / m * (m * *gv - sd - xv * sdx);
                }
            } else {
                g.iter_mut().for_each(|gv| *gv *= gam * is);
            }
        }
        self.gamma.grad_mut().iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
        self.beta.grad_mut().iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
        Some(dx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out][in]`
    pub weight: Param,
    pub bias: Param,
    pub wquant: Option<WeightQuant>,
    #[serde(skip)]
    cache: Option<(Tensor, Vec<f64>, Option<WqCache>)>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng64) -> Self {
        let w = super::he_normal(in_features * out_features, in_features, rng);
        Self::from_weights(in_features, out_features, w, vec![0.0; out_features])
    }

    pub fn from_weights(in_features: usize, out_features: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weight.len(), in_features * out_features);
        assert_eq!(bias.len(), out_features);
        Self { in_features, out_features, weight: Param::new(weight), bias: Param::new(bias), wquant: None, cache: None }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn effective_weights(&self) -> Vec<f64> {
        self.effective().0
    }

    fn effective(&self) -> (Vec<f64>, Option<WqCache>) {
        match &self.wquant {
            Some(q) => {
                let (w, c) = q.forward(&self.weight.value);
                (w, Some(c))
            }
            None => (self.weight.value.clone(), None),
        }
    }

    fn run(&self, x: &Tensor, w: &[f64]) -> Tensor {
        let n = x.shape()[0];
        let (fi, fo) = (self.in_features, self.out_features);
        let mut y = Tensor::zeros(vec![n, fo, 1]);
        for (xb, yb) in x.data().chunks_exact(fi).zip(y.data_mut().chunks_exact_mut(fo)) {
            for (o, yv) in yb.iter_mut().enumerate() {
                let row = &w[o * fi..(o + 1) * fi];
                *yv = row.iter().zip(xb).map(|(a, b)| a * b).sum::<f64>() + self.bias.value[o];
            }
        }
        y
    }

    pub(crate) fn infer(&self, x: &Tensor) -> Tensor {
        let (w, _) = self.effective();
        self.run(x, &w)
    }

    pub(crate) fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let (w, wc) = self.effective();
        let y = self.run(&x, &w);
        if mode != Mode::Eval {
            self.cache = Some((x, w, wc));
        }
        y
    }

    pub(crate) fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let (x, w, wc) = self.cache.take()?;
        let n = x.shape()[0];
        let (fi, fo) = (self.in_features, self.out_features);
        let mut dx = Tensor::zeros(vec![n, fi, 1]);
        let mut dw = vec![0.0; fi * fo];
        let db = self.bias.grad_mut();
        for ((xb, gb), dxb) in x.data().chunks_exact(fi).zip(dy.data().chunks_exact(fo)).zip(dx.data_mut().chunks_exact_mut(fi)) {
            for (o, &g) in gb.iter().enumerate() {
                db[o] += g;
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * fi..(o + 1) * fi];
                let dwrow = &mut dw[o * fi..(o + 1) * fi];
                for i in 0..fi {
                    dwrow[i] += g * xb[i];
                    dxb[i] += g * row[i];
                }
            }
        }
        if let (Some(q), Some(c)) = (&mut self.wquant, &wc) {
            q.backward(&dw, c);
        }
        self.weight.grad_mut().iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        Some(dx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgPool {
    pub kernel: usize,
    pub stride: usize,
    #[serde(skip)]
    cache: Option<Vec<usize>>,
}

impl AvgPool {
    pub fn new(kernel: usize, stride: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        Self { kernel, stride, cache: None }
    }

    pub fn out_len(&self, t: usize) -> usize {
        (t - self.kernel) / self.stride + 1
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub(crate) fn infer(&self, x: &Tensor) -> Tensor {
        let (n, c, t) = x.dims3();
        let t_out = self.out_len(t);
        let mut y = Tensor::zeros(vec![n, c, t_out]);
        let inv = 1.0 / self.kernel as f64;
        for (xr, yr) in x.data().chunks_exact(t).zip(y.data_mut().chunks_exact_mut(t_out)) {
            for (o, yv) in yr.iter_mut().enumerate() {
                let s = o * self.stride;
                *yv = xr[s..s + self.kernel].iter().sum::<f64>() * inv;
            }
        }
        y
    }

    /// Pooling of values on the grid `q`, rounded back onto it exactly as
    /// the integer runtime does.
    pub(crate) fn infer_on_grid(&self, x: &Tensor, q: &QuantParams) -> Tensor {
        let (n, c, t) = x.dims3();
        let t_out = self.out_len(t);
        let mut y = Tensor::zeros(vec![n, c, t_out]);
        let k = self.kernel as i64;
        for (xr, yr) in x.data().chunks_exact(t).zip(y.data_mut().chunks_exact_mut(t_out)) {
            for (o, yv) in yr.iter_mut().enumerate() {
                let s = o * self.stride;
                let sum: i64 = xr[s..s + self.kernel].iter().map(|&v| q.quantize(v)).sum();
                *yv = q.dequantize((sum + k / 2) / k);
            }
        }
        y
    }

    pub(crate) fn forward(&mut self, x: Tensor, mode: Mode, grid: Option<&QuantParams>) -> Tensor {
        if mode != Mode::Eval {
            self.cache = Some(x.shape().to_vec());
        }
        match grid {
            Some(q) => self.infer_on_grid(&x, q),
            None => self.infer(&x),
        }
    }

    pub(crate) fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let shape = self.cache.take()?;
        let t = shape[2];
        let (_, _, t_out) = dy.dims3();
        let mut dx = Tensor::zeros(shape);
        let inv = 1.0 / self.kernel as f64;
        for (gr, dr) in dy.data().chunks_exact(t_out).zip(dx.data_mut().chunks_exact_mut(t)) {
            for (o, g) in gr.iter().enumerate() {
                let s = o * self.stride;
                dr[s..s + self.kernel].iter_mut().for_each(|v| *v += g * inv);
            }
        }
        Some(dx)
    }
}

/// Per-channel multiplicative mask, used for channel search where no batch
/// norm follows a layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub scale: Param,
    #[serde(skip)]
    cache: Option<Tensor>,
}

impl ChannelScale {
    pub fn ones(channels: usize) -> Self {
        Self { scale: Param::new(vec![1.0; channels]), cache: None }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub(crate) fn infer(&self, mut x: Tensor) -> Tensor {
        let (_, c, t) = x.dims3();
        for (r, row) in x.data_mut().chunks_exact_mut(t).enumerate() {
            let s = self.scale.value[r % c];
            row.iter_mut().for_each(|v| *v *= s);
        }
        x
    }

    pub(crate) fn forward(&mut self, x: Tensor, mode: Mode) -> Tensor {
        let y = self.infer(x.clone());
        if mode != Mode::Eval {
            self.cache = Some(x);
        }
        y
    }

    pub(crate) fn backward(&mut self, dy: Tensor) -> Option<Tensor> {
        let x = self.cache.take()?;
        let (_, c, t) = dy.dims3();
        let mut dx = dy;
        let scale = self.scale.value.clone();
        let ds = self.scale.grad_mut();
        for (r, (g, xr)) in dx.data_mut().chunks_exact_mut(t).zip(x.data().chunks_exact(t)).enumerate() {
            let ch = r % c;
            ds[ch] += g.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            let s = scale[ch];
            g.iter_mut().for_each(|v| *v *= s);
        }
        Some(dx)
    }
}

//! Independent oracles and the acceptance checks built on them. Shared by
//! the integration tests and the `acceptance` harness.
#![allow(dead_code)]

use qppg::data::SynthConfig;
use qppg::deploy::{
    estimate_energy, inference_energy_mj, pareto_front, select_for_device, sensor_energy_mj, CandidateModel, CostAxis,
    PlatformProfile, Provenance, Selection, INT8_MACS_PER_S,
};
use qppg::nas::channels::{attach_channel_masks, extract_arch, mask_sites};
use qppg::nas::dilation::{attach_gates, dilation_of, extract_dilation, tap_mask_from_bits};
use qppg::numerics::{rel_err, Rng64};
use qppg::pipeline::{
    front_of, prepare_data, run_flow, run_stage_channels, run_stage_quant, run_stage_seed, DataSource, FlowConfig, PostProcState,
};
use qppg::quant::{fake_quant, softmax, ActQuant, QuantParams, WeightQuant};
use qppg::runtime::{export_model, import_model, pack, run_inference, run_trace, unpack, LayerKind, QLayer, QModel};
use qppg::tcn::{
    build_seed, conv1d_forward, count_params, AvgPool, BatchNorm, ChannelScale, Conv1d, Layer, Linear, Mode, Network, SeedConfig,
    Tensor,
};
use qppg::train::{logcosh_loss, mae, TrainConfig};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_vec(rng: &mut Rng64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

fn range(rng: &mut Rng64, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

// ---------------------------------------------------------------- conv

/// Triple loop over output channel, input channel and tap.
pub fn conv_reference(x: &[f64], c_in: usize, t: usize, w: &[f64], c_out: usize, k: usize, d: usize, s: usize) -> Vec<f64> {
    let t_out = t.div_ceil(s);
    let mut y = vec![0.0; c_out * t_out];
    for m in 0..c_out {
        for to in 0..t_out {
            let mut acc = 0.0;
            for l in 0..c_in {
                for i in 0..k {
                    let src = (to * s) as isize - (d * i) as isize;
                    if src >= 0 {
                        acc += x[l * t + src as usize] * w[(m * c_in + l) * k + i];
                    }
                }
            }
            y[m * t_out + to] = acc;
        }
    }
    y
}

pub fn crit1_conv_oracle() -> Check {
    let mut rng = Rng64::new(0xC0);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (c_in, c_out) = (range(&mut rng, 1, 8), range(&mut rng, 1, 8));
        let (k, d, s, t) = (range(&mut rng, 1, 9), range(&mut rng, 1, 4), range(&mut rng, 1, 4), range(&mut rng, 1, 64));
        let w = rand_vec(&mut rng, c_out * c_in * k, -1.0, 1.0);
        let x = rand_vec(&mut rng, c_in * t, -2.0, 2.0);
        let conv = Conv1d::from_weights(c_in, c_out, k, d, s, w.clone());
        let got = conv1d_forward(&Tensor::new(vec![c_in, t], x.clone()).unwrap(), &conv).map_err(|e| e.to_string())?;
        let want = conv_reference(&x, c_in, t, &w, c_out, k, d, s);
        ensure(got.data().len() == want.len(), || format!("case {case}: length {} vs {}", got.data().len(), want.len()))?;
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err <= 1e-12, || format!("case {case} (c_in {c_in} c_out {c_out} k {k} d {d} s {s} t {t}): error {err:e}"))?;
    }
    Ok(format!("200 configs, max abs error {worst:.1e}"))
}

// ------------------------------------------------------------ gradients

/// Small network with every trainable layer type: biased dilated strided
/// conv, batch norm (batch statistics), ReLU, average pool, channel scale,
/// flatten and two fully connected layers.
pub fn random_grad_net(rng: &mut Rng64) -> Network {
    let c1 = range(rng, 2, 3);
    let c2 = range(rng, 2, 3);
    let (k1, d1, s1) = ([3, 5][rng.below(2)], range(rng, 1, 2), range(rng, 1, 2));
    let t = 16;
    let t1 = t / s1 / 2;
    let mut conv1 = Conv1d::new(2, c1, k1, d1, s1, rng);
    conv1.bias = Some(qppg::tcn::Param::new(rand_vec(rng, c1, -0.5, 0.5)));
    let mut bn = BatchNorm::new(c1);
    bn.gamma.value = rand_vec(rng, c1, 0.5, 1.5);
    bn.beta.value = rand_vec(rng, c1, -0.3, 0.3);
    let mut scale = ChannelScale::ones(c2);
    scale.scale.value = rand_vec(rng, c2, 0.5, 1.5);
    let mut bn_fc = BatchNorm::new(3);
    bn_fc.gamma.value = rand_vec(rng, 3, 0.5, 1.5);
    Network::new(
        2,
        t,
        vec![
            Layer::Conv1d(conv1),
            Layer::BatchNorm(bn),
            Layer::relu(),
            Layer::AvgPool(AvgPool::new(2, 2)),
            Layer::Conv1d(Conv1d::new(c1, c2, 3, 1, 1, rng)),
            Layer::ChannelScale(scale),
            Layer::relu(),
            Layer::flatten(),
            Layer::Linear(Linear::new(c2 * t1, 3, rng)),
            Layer::BatchNorm(bn_fc),
            Layer::relu(),
            Layer::Linear(Linear::new(3, 1, rng)),
        ],
    )
}

fn net_loss(net: &mut Network, x: &Tensor, target: &[f64]) -> f64 {
    let pred = net.forward(x.clone(), Mode::Train).unwrap().into_data();
    net.clear_caches();
    logcosh_loss(&pred, target).0
}

const FD_H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
/// Absolute differences below this count as agreement (FD truncation).
const GRAD_FLOOR: f64 = 1e-7;

/// Worst relative error over all parameters and inputs of one network.
pub fn grad_check_net(net: &mut Network, rng: &mut Rng64) -> Result<f64, String> {
    let n = 4;
    let x = Tensor::new(vec![n, net.in_channels, net.in_len], rand_vec(rng, n * net.in_channels * net.in_len, -1.0, 1.0)).unwrap();
    let target = rand_vec(rng, n, -1.0, 1.0);
    net.zero_grad();
    let pred = net.forward(x.clone(), Mode::Train).map_err(|e| e.to_string())?.into_data();
    let (_, up) = logcosh_loss(&pred, &target);
    let dx = net.backward_input(&up).map_err(|e| e.to_string())?;
    let analytic = net.flat_grads(|_| true);
    let params = net.flat_params(|_| true);
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += FD_H;
        net.set_flat_params(|_| true, &p);
        let up_l = net_loss(net, &x, &target);
        p[i] -= 2.0 * FD_H;
        net.set_flat_params(|_| true, &p);
        let down_l = net_loss(net, &x, &target);
        let numeric = (up_l - down_l) / (2.0 * FD_H);
        worst = worst.max(rel_err(analytic[i], numeric, GRAD_FLOOR));
    }
    net.set_flat_params(|_| true, &params);
    for i in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_H;
        let up_l = net_loss(net, &xp, &target);
        xp.data_mut()[i] -= 2.0 * FD_H;
        let down_l = net_loss(net, &xp, &target);
        worst = worst.max(rel_err(dx.data()[i], (up_l - down_l) / (2.0 * FD_H), GRAD_FLOOR));
    }
    Ok(worst)
}

pub fn crit2_gradients() -> Check {
    let mut rng = Rng64::new(0x6AD);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let mut net = random_grad_net(&mut rng);
        let e = grad_check_net(&mut net, &mut rng)?;
        ensure(e < GRAD_TOL, || format!("net {i}: relative error {e:e}"))?;
        worst = worst.max(e);
    }
    // the loss on its own
    for _ in 0..20 {
        let pred = rand_vec(&mut rng, 5, -30.0, 30.0);
        let target = rand_vec(&mut rng, 5, -30.0, 30.0);
        let (_, g) = logcosh_loss(&pred, &target);
        for i in 0..pred.len() {
            let mut p = pred.clone();
            p[i] += FD_H;
            let up = logcosh_loss(&p, &target).0;
            p[i] -= 2.0 * FD_H;
            let numeric = (up - logcosh_loss(&p, &target).0) / (2.0 * FD_H);
            let e = rel_err(g[i], numeric, GRAD_FLOOR);
            ensure(e < GRAD_TOL, || format!("logcosh: relative error {e:e}"))?;
            worst = worst.max(e);
        }
    }
    Ok(format!("20 nets + logcosh, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------- quantizers

pub fn eps_of(alpha: f64, beta: f64, bits: u8) -> f64 {
    (beta - alpha) / ((1u64 << bits) - 1) as f64
}

/// `clamp(round_half_away((t - alpha) / eps), 0, 2^N - 1)`.
pub fn quantize_reference(t: f64, alpha: f64, beta: f64, bits: u8) -> i64 {
    let v = (t - alpha) / eps_of(alpha, beta, bits);
    let r = if v >= 0.0 { (v + 0.5).floor() } else { -((-v + 0.5).floor()) };
    r.clamp(0.0, ((1u64 << bits) - 1) as f64) as i64
}

fn act_quant_net(formats: Vec<u8>, delta: Option<Vec<f64>>, len: usize) -> Network {
    let mut q = ActQuant::new(formats);
    if let Some(d) = delta {
        q.delta.value = d;
    }
    Network::new(1, len, vec![Layer::ActQuant(q)])
}

pub fn crit3_quantizers() -> Check {
    let mut rng = Rng64::new(0x9A);
    let mut cases = 0usize;
    for _ in 0..2000 {
        let bits = [2u8, 4, 8][rng.below(3)];
        let alpha = rng.uniform(-5.0, 0.0);
        let beta = alpha + rng.uniform(0.1, 10.0);
        let q = QuantParams::new(alpha, beta, bits).map_err(|e| e.to_string())?;
        let eps = q.eps();
        let mut ts = rand_vec(&mut rng, 50, alpha - 2.0, beta + 2.0);
        ts.sort_by(f64::total_cmp);
        let mut prev = i64::MIN;
        for &t in &ts {
            let c = q.quantize(t);
            ensure((0..=q.max_code()).contains(&c), || format!("code {c} outside [0, {}]", q.max_code()))?;
            ensure(c >= prev, || format!("not monotone at t = {t}"))?;
            ensure(c == quantize_reference(t, alpha, beta, bits), || format!("t = {t}: code {c} differs from the reference"))?;
            prev = c;
            if (alpha..=beta).contains(&t) {
                let err = (t - q.dequantize(c)).abs();
                ensure(err <= eps / 2.0 + 1e-6, || format!("round trip error {err} > eps/2 at t = {t}"))?;
            }
            cases += 1;
        }
    }
    // a single format reduces the mixtures to plain fake quantization
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let bits = [2u8, 4, 8][rng.below(3)];
        let w = rand_vec(&mut rng, 64, -1.5, 1.0);
        let (fq, _) = WeightQuant::new(vec![bits]).forward(&w);
        let plain = fake_quant(&w, &WeightQuant::params_for(&w, bits));
        worst = worst.max(fq.iter().zip(&plain).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let x = rand_vec(&mut rng, 64, -2.0, 3.0);
        let mut net = act_quant_net(vec![bits], None, 64);
        let xt = Tensor::new(vec![1, 1, 64], x.clone()).unwrap();
        net.forward(xt.clone(), Mode::Train).map_err(|e| e.to_string())?;
        let got = net.predict(xt).map_err(|e| e.to_string())?;
        let Layer::ActQuant(a) = &net.layers[0] else { unreachable!() };
        let plain = fake_quant(&x, &a.params(bits).ok_or("no observed range")?);
        worst = worst.max(got.iter().zip(&plain).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(worst <= 1e-6, || format!("single-format mixture differs from fake quantization by {worst:e}"))?;
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let n = range(&mut rng, 1, 6);
        let scale = [1.0, 10.0, 300.0][rng.below(3)];
        let p = softmax(&rand_vec(&mut rng, n, -scale, scale));
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        ensure(p.iter().all(|v| (0.0..=1.0).contains(v)), || "softmax outside [0, 1]".into())?;
    }
    ensure(worst_sum <= 1e-7, || format!("softmax sums off by {worst_sum:e}"))?;
    Ok(format!("{cases} codes checked; single-format gap {worst:.1e}; softmax sum error {worst_sum:.1e}"))
}

// ------------------------------------------------------ integer runtime

fn rand_qparams(rng: &mut Rng64, include_zero: bool) -> QuantParams {
    let bits = [2, 4, 8][rng.below(3)];
    let (lo, hi) = if include_zero {
        let lo = if rng.below(2) == 0 { 0.0 } else { rng.uniform(-3.0, 0.0) };
        (lo, rng.uniform(0.5, 4.0))
    } else {
        let lo = rng.uniform(40.0, 80.0);
        (lo, lo + rng.uniform(20.0, 120.0))
    };
    QuantParams::new(lo, hi, bits).unwrap().to_f32_grid()
}

/// Random valid integer model: convolutions (some followed by pooling), an
/// optional hidden FC and a scalar FC output.
pub fn random_qmodel(rng: &mut Rng64) -> (QModel, usize, usize) {
    let c0 = range(rng, 1, 4);
    let t0 = range(rng, 4, 24);
    let mut layers = Vec::new();
    let mut q = rand_qparams(rng, true);
    let (mut c, mut t) = (c0, t0);
    let n_conv = range(rng, 1, 3);
    let compute = |rng: &mut Rng64, kind: LayerKind, c_in: usize, c_out: usize, k: usize, d: usize, s: usize, in_q: QuantParams, out_q: QuantParams| {
        let wb = [2u8, 4, 8][rng.below(3)];
        let max_w = (1u32 << wb) - 1;
        let n = c_out * c_in * k;
        let codes: Vec<u8> = (0..n).map(|_| rng.below(max_w as usize + 1) as u8).collect();
        let mut l = QLayer {
            kind,
            weight_bits: wb,
            act_bits: out_q.bits,
            c_in,
            c_out,
            k,
            d,
            s,
            in_q,
            out_q,
            z_w: rng.below(max_w as usize + 1) as i32,
            bias: vec![],
            mult: vec![],
            shift: vec![],
            weights: pack(&codes, wb).unwrap(),
        };
        let room = ((1i64 << 31) - 1 - l.acc_bound()).min(1 << 20);
        for _ in 0..c_out {
            l.bias.push((rng.uniform(-1.0, 1.0) * room as f64) as i32);
            l.mult.push((rng.next_u64() >> 33) as i32);
            l.shift.push(rng.below(32) as u8);
        }
        l
    };
    for _ in 0..n_conv {
        let (k, d, s, c_out) = (range(rng, 1, 5), range(rng, 1, 3), range(rng, 1, 2), range(rng, 1, 6));
        let out_q = rand_qparams(rng, true);
        let kind = if rng.below(2) == 0 { LayerKind::Conv } else { LayerKind::ConvRelu };
        layers.push(compute(rng, kind, c, c_out, k, d, s, q, out_q));
        c = c_out;
        t = t.div_ceil(s);
        q = out_q;
        if t >= 2 && rng.below(2) == 0 {
            let k = range(rng, 2, t.min(3));
            layers.push(QLayer {
                kind: LayerKind::AvgPool,
                weight_bits: 0,
                act_bits: q.bits,
                c_in: c,
                c_out: c,
                k,
                d: 1,
                s: range(rng, 1, 2),
                in_q: q,
                out_q: q,
                z_w: 0,
                bias: vec![],
                mult: vec![],
                shift: vec![],
                weights: pack(&[], 8).unwrap(),
            });
            t = (t - k) / layers.last().unwrap().s + 1;
        }
    }
    let mut features = c * t;
    if rng.below(2) == 0 {
        let hidden = range(rng, 1, 6);
        let out_q = rand_qparams(rng, true);
        layers.push(compute(rng, LayerKind::LinearRelu, features, hidden, 1, 1, 1, q, out_q));
        features = hidden;
        q = out_q;
    }
    let out_q = rand_qparams(rng, false);
    layers.push(compute(rng, LayerKind::Linear, features, 1, 1, 1, 1, q, out_q));
    (QModel { layers }, c0, t0)
}

fn unpack_reference(bytes: &[u8], n: usize, bits: u8) -> Vec<i64> {
    (0..n)
        .map(|i| {
            let bit = i * bits as usize;
            ((bytes[bit / 8] >> (bit % 8)) as i64) & ((1i64 << bits) - 1)
        })
        .collect()
}

fn zero_point(q: &QuantParams) -> i64 {
    let v = -q.alpha / eps_of(q.alpha, q.beta, q.bits);
    (if v >= 0.0 { (v + 0.5).floor() } else { -((-v + 0.5).floor()) }) as i64
}

/// Integer forward pass in 64/128-bit arithmetic, written from the layer
/// definitions without touching the runtime.
pub fn reference_inference(m: &QModel, x: &[f64]) -> Vec<Vec<i64>> {
    let first = &m.layers[0];
    let c0 = first.c_in;
    let mut t = if first.kind.is_linear() { 1 } else { x.len() / c0 };
    let mut c = c0;
    let mut a: Vec<i64> = x.iter().map(|&v| quantize_reference(v, first.in_q.alpha, first.in_q.beta, first.in_q.bits)).collect();
    let mut trace = Vec::new();
    for l in &m.layers {
        if l.kind == LayerKind::AvgPool {
            let t_out = (t - l.k) / l.s + 1;
            let mut y = vec![0i64; c * t_out];
            for ch in 0..c {
                for o in 0..t_out {
                    let sum: i64 = (0..l.k).map(|j| a[ch * t + o * l.s + j]).sum();
                    y[ch * t_out + o] = (sum + (l.k as i64) / 2) / l.k as i64;
                }
            }
            a = y;
            t = t_out;
        } else {
            let (c_in, t_in) = if l.kind.is_linear() { (c * t, 1) } else { (c, t) };
            assert_eq!(c_in, l.c_in);
            let w = unpack_reference(&l.weights.bytes, l.n_weights(), l.weight_bits);
            let (zx, zo) = (zero_point(&l.in_q), zero_point(&l.out_q));
            let t_out = if l.kind.is_linear() { 1 } else { t_in.div_ceil(l.s) };
            let top = (1i64 << l.out_q.bits) - 1;
            let mut y = vec![0i64; l.c_out * t_out];
            for co in 0..l.c_out {
                for to in 0..t_out {
                    let mut acc = l.bias[co] as i64;
                    for ci in 0..c_in {
                        for i in 0..l.k {
                            let src = (to * l.s) as i64 - (l.d * i) as i64;
                            if src >= 0 {
                                acc += (a[ci * t_in + src as usize] - zx) * (w[(co * c_in + ci) * l.k + i] - l.z_w as i64);
                            }
                        }
                    }
                    let prod = acc as i128 * l.mult[co] as i128;
                    let round = if l.shift[co] == 0 { 0 } else { 1i128 << (l.shift[co] - 1) };
                    let mut v = (((prod + round) >> l.shift[co]) as i64 + zo).clamp(0, top);
                    if matches!(l.kind, LayerKind::ConvRelu | LayerKind::LinearRelu) {
                        v = v.max(zo);
                    }
                    y[co * t_out + to] = v;
                }
            }
            a = y;
            c = l.c_out;
            t = t_out;
        }
        trace.push(a.clone());
    }
    trace
}

pub fn crit4_bit_exact() -> Check {
    let mut rng = Rng64::new(0x1E7);
    let mut inputs = 0;
    for model_i in 0..100 {
        let (m, c0, t0) = random_qmodel(&mut rng);
        m.validate().map_err(|e| format!("model {model_i}: generator produced an invalid model: {e}"))?;
        for _ in 0..10 {
            let x = rand_vec(&mut rng, c0 * t0, -4.0, 4.0);
            let want = reference_inference(&m, &x);
            let got = run_trace(&m, &x).map_err(|e| e.to_string())?;
            for (li, (g, w)) in got.iter().zip(&want).enumerate() {
                let g: Vec<i64> = g.iter().map(|&v| v as i64).collect();
                ensure(&g == w, || format!("model {model_i} layer {li}: runtime {g:?} vs reference {w:?}"))?;
            }
            let y = run_inference(&m, &x).map_err(|e| e.to_string())?;
            let last = m.layers.last().unwrap().out_q;
            ensure(y == last.dequantize(want.last().unwrap()[0]), || format!("model {model_i}: output {y} differs"))?;
            inputs += 1;
        }
        let bytes = export_model(&m).map_err(|e| e.to_string())?;
        let back = import_model(&bytes).map_err(|e| e.to_string())?;
        ensure(back == m, || format!("model {model_i}: import differs from the exported model"))?;
        ensure(export_model(&back).unwrap() == bytes, || format!("model {model_i}: re-export is not byte-identical"))?;
    }
    for i in 0..1000 {
        let bits = [2u8, 4, 8][i % 3];
        let n = rng.below(200);
        let v: Vec<u8> = (0..n).map(|_| rng.below(1 << bits) as u8).collect();
        let p = pack(&v, bits).map_err(|e| e.to_string())?;
        ensure(unpack(&p) == v, || format!("pack/unpack mismatch at {bits} bits"))?;
        let r: Vec<u8> = unpack_reference(&p.bytes, n, bits).into_iter().map(|c| c as u8).collect();
        ensure(r == v, || "packed layout differs from LSB-first".into())?;
    }
    Ok(format!("100 models x 10 inputs ({inputs} runs) bit-exact; 1000 pack round trips"))
}

// ------------------------------------------------------------------- nas

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_inputs(rng: &mut Rng64, net: &Network, n: usize) -> Tensor {
    Tensor::new(vec![n, net.in_channels, net.in_len], rand_vec(rng, n * net.in_channels * net.in_len, -2.0, 2.0)).unwrap()
}

/// Randomize running statistics and affine terms so eval-mode batch norms
/// are not the identity.
fn randomize_bns(net: &mut Network, rng: &mut Rng64) {
    for l in &mut net.layers {
        if let Layer::BatchNorm(bn) = l {
            let c = bn.channels();
            bn.gamma.value = rand_vec(rng, c, 0.5, 1.5);
            bn.beta.value = rand_vec(rng, c, -0.2, 0.5);
            bn.running_mean = rand_vec(rng, c, -0.2, 0.2);
            bn.running_var = rand_vec(rng, c, 0.5, 2.0);
        }
    }
}

/// Zero a random subset of every mask (keeping at least one channel); for
/// batch norms the shift is zeroed too so the channel is exactly zero.
fn zero_random_masks(net: &mut Network, rng: &mut Rng64) -> usize {
    let mut zeroed = 0;
    for site in mask_sites(net) {
        let c = match &net.layers[site.mask] {
            Layer::BatchNorm(bn) => bn.channels(),
            Layer::ChannelScale(s) => s.scale.len(),
            _ => unreachable!(),
        };
        let keep = rng.below(c);
        for ch in 0..c {
            if ch == keep || rng.below(2) == 0 {
                continue;
            }
            match &mut net.layers[site.mask] {
                Layer::BatchNorm(bn) => {
                    bn.gamma.value[ch] = 0.0;
                    bn.beta.value[ch] = 0.0;
                }
                Layer::ChannelScale(s) => s.scale.value[ch] = 0.0,
                _ => unreachable!(),
            }
            zeroed += 1;
        }
    }
    zeroed
}

pub fn crit5_nas_equivalence() -> Check {
    let mut rng = Rng64::new(0x5A5);
    // channel extraction, batch-norm masks
    let mut net = build_seed(&SeedConfig::tiny(), 3);
    randomize_bns(&mut net, &mut rng);
    let zeroed = zero_random_masks(&mut net, &mut rng);
    let small = extract_arch(&net, 0.0).map_err(|e| e.to_string())?;
    let x = random_inputs(&mut rng, &net, 100);
    let e_bn = max_diff(&net.predict(x.clone()).unwrap(), &small.predict(x).unwrap());
    ensure(e_bn <= 1e-12, || format!("batch-norm mask extraction differs by {e_bn:e}"))?;
    ensure(count_params(&small) < count_params(&net), || "nothing was pruned".into())?;

    // channel extraction, explicit channel scales
    let mut net = Network::new(
        2,
        16,
        vec![
            Layer::Conv1d(Conv1d::new(2, 5, 3, 1, 1, &mut rng)),
            Layer::relu(),
            Layer::Conv1d(Conv1d::new(5, 4, 3, 2, 2, &mut rng)),
            Layer::relu(),
            Layer::flatten(),
            Layer::Linear(Linear::new(32, 6, &mut rng)),
            Layer::relu(),
            Layer::Linear(Linear::new(6, 1, &mut rng)),
        ],
    );
    attach_channel_masks(&mut net);
    for l in &mut net.layers {
        if let Layer::ChannelScale(s) = l {
            s.scale.value = rand_vec(&mut rng, s.scale.len(), 0.5, 1.5);
        }
    }
    zero_random_masks(&mut net, &mut rng);
    let small = extract_arch(&net, 0.0).map_err(|e| e.to_string())?;
    let x = random_inputs(&mut rng, &net, 100);
    let e_cs = max_diff(&net.predict(x.clone()).unwrap(), &small.predict(x).unwrap());
    ensure(e_cs <= 1e-12, || format!("channel-scale extraction differs by {e_cs:e}"))?;

    // dilation extraction
    let mut e_pit = 0.0f64;
    for trial in 0..10 {
        let mut net = build_seed(&SeedConfig::tiny(), 10 + trial);
        randomize_bns(&mut net, &mut rng);
        attach_gates(&mut net);
        for l in &mut net.layers {
            if let Layer::Conv1d(c) = l {
                if let Some(g) = &mut c.gates {
                    g.theta.value.iter_mut().for_each(|t| *t = if rng.below(2) == 0 { 0.2 } else { 0.8 });
                }
            }
        }
        let ext = extract_dilation(&net);
        let x = random_inputs(&mut rng, &net, 10);
        e_pit = e_pit.max(max_diff(&net.predict(x.clone()).unwrap(), &ext.predict(x).unwrap()));
    }
    ensure(e_pit <= 1e-12, || format!("dilation extraction differs by {e_pit:e}"))?;

    // every gate configuration leaves a regular tap set
    let mut configs = 0;
    for h in 1..=4usize {
        let k = (1 << h) + 1;
        for code in 0..1u32 << h {
            let bits: Vec<bool> = (0..h).map(|g| code >> g & 1 == 1).collect();
            let d = dilation_of(&bits);
            let alive: Vec<usize> = tap_mask_from_bits(&bits, k).iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect();
            let regular: Vec<usize> = (0..k).filter(|j| j % d == 0).collect();
            ensure(d.is_power_of_two() && alive == regular, || format!("H={h} gates {bits:?}: taps {alive:?}, dilation {d}"))?;
            configs += 1;
        }
    }
    Ok(format!(
        "{zeroed} channels zeroed; errors bn {e_bn:.1e}, scale {e_cs:.1e}, dilation {e_pit:.1e}; {configs} gate configs regular"
    ))
}

// ---------------------------------------------------------------- deploy

fn sig3(v: f64) -> f64 {
    let mag = 10f64.powi(2 - v.abs().log10().floor() as i32);
    (v * mag).round() / mag
}

pub fn reference_candidates() -> Vec<CandidateModel> {
    let c = |id: &str, bytes: u64, mae: f64, macs: u64| CandidateModel {
        id: id.into(),
        mae_bpm: mae,
        bytes,
        macs,
        layers: vec![],
        provenance: Provenance::default(),
    };
    vec![c("large", 412_000, 4.41, 17_500_000), c("mixed", 11_300, 4.64, 513_000), c("int4", 7_150, 5.40, 600_000)]
}

pub fn crit6_deploy() -> Check {
    let wb = PlatformProfile::bundled("stm32wb").map_err(|e| e.to_string())?;
    let small = inference_energy_mj(wb.p_active_mw, 0.0716);
    ensure(sig3(small) == 1.79, || format!("25 mW x 71.6 ms = {small} mJ"))?;
    let large = inference_energy_mj(wb.p_active_mw, 1.90);
    let rel = (large - 47.65).abs() / 47.65;
    ensure(rel <= 0.02, || format!("25 mW x 1.90 s = {large} mJ, {:.2}% from 47.65", rel * 100.0))?;
    // the same numbers through the latency model
    let mut s = reference_candidates()[0].clone();
    s.macs = (0.0716 * INT8_MACS_PER_S).round() as u64;
    let e_small = estimate_energy(&s, &wb).map_err(|e| e.to_string())?;
    ensure(sig3(e_small.inference_mj) == 1.79, || format!("modelled small inference {} mJ", e_small.inference_mj))?;
    let e_large = estimate_energy(&reference_candidates()[0], &wb).map_err(|e| e.to_string())?;
    ensure((e_large.latency_s - 1.90).abs() < 1e-9, || format!("latency {}", e_large.latency_s))?;
    let (ppg, imu) = sensor_energy_mj(&wb);
    ensure(ppg == 11.0 && imu == 0.06, || format!("sensor energies {ppg} / {imu} mJ"))?;

    let front = pareto_front(&reference_candidates(), CostAxis::Bytes);
    ensure(front.len() == 3, || "reference candidates are not mutually non-dominated".into())?;
    let mut picks = Vec::new();
    for (profile, bytes, mae) in [("stm32wb", 412_000, 4.41), ("mkv4", 11_300, 4.64), ("stm32l0", 7_150, 5.40)] {
        let p = PlatformProfile::bundled(profile).map_err(|e| e.to_string())?;
        match select_for_device(&front, &p) {
            Selection::Fit(c) => {
                ensure(c.bytes == bytes && c.mae_bpm == mae, || format!("{profile}: picked {} ({} B)", c.id, c.bytes))?;
                picks.push(format!("{profile}->{}kB/{}", bytes as f64 / 1000.0, mae));
            }
            Selection::NoFit => return Err(format!("{profile}: nothing fits")),
        }
    }
    Ok(format!("1.79 mJ, {large:.2} mJ ({:.2}% off), sensors 11 / 0.06 mJ; {}", rel * 100.0, picks.join(", ")))
}

// ----------------------------------------------------------- postprocess

pub fn crit7_postprocess() -> Check {
    let cases = [(100.0, 120.0, 110.0), (100.0, 105.0, 105.0), (60.0, 40.0, 54.0)];
    for (mean, hr, want) in cases {
        let mut s = PostProcState::with_history(&[mean; 10]);
        let got = s.postprocess(hr).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("history mean {mean}, hr {hr}: got {got}, expected {want}"))?;
    }
    Ok("110, 105 (pass-through), 54".into())
}

// ------------------------------------------------------------ end to end

pub fn synthetic_source(windows_per_subject: usize) -> DataSource {
    DataSource::Synthetic(SynthConfig {
        n_subjects: 2,
        duration_s: SynthConfig::duration_for_windows(windows_per_subject),
        seed: 1,
        ..SynthConfig::default()
    })
}

pub fn crit8_config() -> FlowConfig {
    FlowConfig {
        data: synthetic_source(1000),
        seed_net: SeedConfig { block_channels: vec![8, 16, 16], fc_sizes: vec![16, 8, 1], ..SeedConfig::default() },
        train: TrainConfig { epochs: 20, lr: 3e-3, batch_size: 32, ..TrainConfig::default() },
        warmup_epochs: 0,
        search_epochs: 8,
        finetune_epochs: 16,
        qat_epochs: 3,
        mn_lambdas: vec![1e-4, 1e-3, 1.2e-3, 1.5e-3, 2e-3],
        quant_formats: vec![8],
        edmips_lambdas: vec![1e-4],
        edmips_picks: 2,
        ..FlowConfig::default()
    }
}

pub fn crit8_end_to_end() -> Check {
    let cfg = crit8_config();
    let ws = prepare_data(&cfg).map_err(|e| e.to_string())?;
    ensure(ws.train.len() + ws.val.len() + ws.test.len() == 2000, || "dataset is not 2000 windows".into())?;
    let mean = ws.train.targets.iter().sum::<f64>() / ws.train.len() as f64;
    let const_mae = mae(&vec![mean; ws.test.len()], &ws.test.targets);

    let seed = run_stage_seed(&cfg, &ws).map_err(|e| e.to_string())?;
    let seed_mae = seed.entry.candidate.mae_bpm;
    ensure(seed_mae <= 0.5 * const_mae, || format!("(a) seed MAE {seed_mae:.3} > 0.5 x constant {const_mae:.3}"))?;

    let ch = run_stage_channels(&cfg, &ws, &seed);
    ensure(ch.failures.is_empty(), || format!("(b) failed sweep points: {:?}", ch.failures))?;
    let arch = |net: &Network| -> Vec<usize> {
        net.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv1d(c) => Some(c.c_out),
                Layer::Linear(f) => Some(f.out_features),
                _ => None,
            })
            .collect()
    };
    let mut archs: Vec<Vec<usize>> = ch.artifacts.iter().map(|a| arch(&a.net)).collect();
    archs.sort();
    archs.dedup();
    let best_float = ch.artifacts.iter().map(|a| a.entry.candidate.mae_bpm).fold(seed_mae, f64::min);
    let seed_params = seed.entry.params;
    let small = ch
        .artifacts
        .iter()
        .filter(|a| a.entry.params * 4 <= seed_params && a.entry.candidate.mae_bpm <= 1.2 * best_float)
        .min_by_key(|a| a.entry.params);
    ensure(archs.len() >= 3, || format!("(b) only {} distinct architectures", archs.len()))?;
    let small = small.ok_or_else(|| {
        let pts: Vec<String> =
            ch.artifacts.iter().map(|a| format!("{}:{}p/{:.3}", a.id(), a.entry.params, a.entry.candidate.mae_bpm)).collect();
        format!("(b) no candidate with <= {} params and MAE <= {:.3}: {}", seed_params / 4, 1.2 * best_float, pts.join(" "))
    })?;

    let q = run_stage_quant(&cfg, &ws, &front_of(std::slice::from_ref(&seed), CostAxis::Bytes));
    let int8 = q.artifacts.iter().find(|a| a.id() == "seed-w8a8").ok_or_else(|| format!("(c) no int8 model: {:?}", q.failures))?;
    let gap = (int8.entry.candidate.mae_bpm - seed_mae).abs();
    ensure(gap <= 0.5, || format!("(c) int8 MAE {:.3} vs float {seed_mae:.3}", int8.entry.candidate.mae_bpm))?;
    Ok(format!(
        "(a) seed {seed_mae:.3} vs constant {const_mae:.3}; (b) {} archs, {} {}p ({:.1}x fewer) MAE {:.3} <= {:.3}; (c) int8 {:.3} (gap {gap:.3})",
        archs.len(),
        small.id(),
        small.entry.params,
        seed_params as f64 / small.entry.params as f64,
        small.entry.candidate.mae_bpm,
        1.2 * best_float,
        int8.entry.candidate.mae_bpm
    ))
}

pub fn crit9_config() -> FlowConfig {
    FlowConfig {
        data: synthetic_source(1000),
        seed_net: SeedConfig::tiny(),
        train: TrainConfig { epochs: 2, lr: 3e-3, batch_size: 32, ..TrainConfig::default() },
        warmup_epochs: 0,
        search_epochs: 1,
        finetune_epochs: 1,
        qat_epochs: 1,
        mn_lambdas: vec![1e-3, 1e-2],
        pit_lambdas: vec![1e-4, 1e-2],
        pit_seeds: 2,
        quant_formats: vec![2, 4, 8],
        edmips_lambdas: vec![1e-4],
        edmips_picks: 2,
        seed: 9,
        ..FlowConfig::default()
    }
}

pub fn crit9_determinism() -> Check {
    let cfg = crit9_config();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let mut runs = Vec::new();
    for d in &dirs {
        let report = run_flow(&cfg, Some(d.path())).map_err(|e| e.to_string())?;
        let csv = std::fs::read(d.path().join("pareto.csv")).map_err(|e| e.to_string())?;
        runs.push((csv, report.manifest_hash, report.manifest.candidates.len()));
    }
    ensure(runs[0].0 == runs[1].0, || "pareto.csv differs between runs".into())?;
    ensure(runs[0].1 == runs[1].1, || format!("manifest hash {} vs {}", runs[0].1, runs[1].1))?;
    Ok(format!("{} candidates, manifest {}", runs[0].2, &runs[0].1[..16]))
}

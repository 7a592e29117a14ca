//! LogCosh regression training, MAE evaluation, leave-one-subject-out
//! orchestration and per-subject fine-tuning.

use crate::data::{split_loso, DataError, Normalizer, WindowSet, N_CHANNELS, WINDOW_LEN};
use crate::numerics::Rng64;
use crate::tcn::{Mode, Network, ParamKind, TcnError, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch} (lr {lr})")]
    Divergence { epoch: usize, lr: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Tcn(#[from] TcnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub lr_finetune_scale: f64,
    /// Return the best-validation snapshot instead of the final weights.
    /// Search stages turn this off: their best-validation epoch is usually
    /// the least regularized one.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, epochs: 30, batch_size: 128, seed: 0, optimizer: Optimizer::default(), lr_finetune_scale: 0.1, keep_best: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae_bpm: f64,
    pub per_subject: BTreeMap<String, f64>,
}

/// `mean log(cosh(pred - target))` and its gradient w.r.t. `pred`.
pub fn logcosh_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len());
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let z = p - t;
            let a = z.abs();
            loss += a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2;
            z.tanh() / n
        })
        .collect();
    (loss / n, grad)
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

/// Stage-specific behaviour plugged into the training loop.
pub trait TrainHook {
    fn trainable(&self, kind: ParamKind) -> bool {
        !matches!(kind, ParamKind::DilationGate | ParamKind::PrecisionCoef)
    }

    fn lr_scale(&self, _kind: ParamKind) -> f64 {
        1.0
    }

    /// Add regularizer gradients to `net` and return the weighted cost.
    fn regularize(&mut self, _net: &mut Network) -> f64 {
        0.0
    }

    fn after_step(&mut self, _net: &mut Network) {}

    fn end_epoch(&mut self, _net: &mut Network, _epoch: usize) {}
}

pub struct NoHook;

impl TrainHook for NoHook {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    /// Validation MAE per epoch (training MAE when no validation set).
    pub trace: Vec<f64>,
    pub best_epoch: usize,
}

/// Per-parameter optimizer state, indexed in `visit_params` order.
struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl OptState {
    fn new() -> Self {
        Self { m: Vec::new(), v: Vec::new(), t: 0 }
    }

    fn step(&mut self, net: &mut Network, cfg: &TrainConfig, lr: f64, hook: &dyn TrainHook) {
        self.t += 1;
        let t = self.t;
        let mut idx = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        net.visit_params(&mut |kind, p| {
            let i = idx;
            idx += 1;
            if m.len() <= i {
                m.push(vec![0.0; p.len()]);
                v.push(vec![0.0; p.len()]);
            }
            if !hook.trainable(kind) {
                return;
            }
            let lr = lr * hook.lr_scale(kind);
            let n = p.len();
            let grad = p.grad_mut()[..n].to_vec();
            match cfg.optimizer {
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for j in 0..n {
                        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * grad[j];
                        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * grad[j] * grad[j];
                        let mh = m[i][j] / c1;
                        let vh = v[i][j] / c2;
                        p.value[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                Optimizer::Sgd { momentum } => {
                    for j in 0..n {
                        m[i][j] = momentum * m[i][j] + grad[j];
                        p.value[j] -= lr * m[i][j];
                    }
                }
            }
        });
    }
}

/// Copy windows `idx` of `ws` into a `[n, 4, 256]` tensor.
pub fn batch_tensor(ws: &WindowSet, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * WindowSet::WINDOW_SIZE);
    for &i in idx {
        data.extend(ws.window(i).iter().map(|&v| v as f64));
    }
    Tensor::new(vec![idx.len(), N_CHANNELS, WINDOW_LEN], data).expect("window size")
}

/// Eval-mode predictions for every window, in batches.
pub fn predict_set(net: &Network, ws: &WindowSet) -> Result<Vec<f64>, TcnError> {
    let idx: Vec<usize> = (0..ws.len()).collect();
    let mut out = Vec::with_capacity(ws.len());
    for chunk in idx.chunks(256) {
        out.extend(net.predict(batch_tensor(ws, chunk))?);
    }
    Ok(out)
}

pub fn evaluate(net: &Network, ws: &WindowSet) -> Result<f64, TcnError> {
    Ok(mae(&predict_set(net, ws)?, &ws.targets))
}

pub fn train(
    net: Network,
    train_set: &WindowSet,
    val_set: Option<&WindowSet>,
    cfg: &TrainConfig,
    hook: &mut dyn TrainHook,
) -> Result<TrainOutcome, TrainError> {
    train_with_mode(net, train_set, val_set, cfg, hook, cfg.lr, Mode::Train)
}

/// Training loop. `mode` selects batch statistics (`Train`) or frozen
/// running statistics (`FrozenStats`) in batch norm.
pub fn train_with_mode(
    mut net: Network,
    train_set: &WindowSet,
    val_set: Option<&WindowSet>,
    cfg: &TrainConfig,
    hook: &mut dyn TrainHook,
    lr: f64,
    mode: Mode,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_some_and(|v| v.is_empty()) {
        return Err(TrainError::Protocol("training and validation sets must be non-empty".into()));
    }
    net.validate()?;
    let mut rng = Rng64::new(cfg.seed);
    let mut opt = OptState::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network)> = None;

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            // a lone trailing sample gives degenerate batch statistics
            if batch.len() < 2 && order.len() >= 2 && mode == Mode::Train {
                continue;
            }
            let x = batch_tensor(train_set, batch);
            let targets: Vec<f64> = batch.iter().map(|&i| train_set.targets[i]).collect();
            net.zero_grad();
            let pred = net.forward(x, mode)?.into_data();
            let (loss, grad) = logcosh_loss(&pred, &targets);
            if !loss.is_finite() {
                return Err(TrainError::Divergence { epoch, lr });
            }
            net.backward(&grad)?;
            let reg = hook.regularize(&mut net);
            if !reg.is_finite() {
                return Err(TrainError::Divergence { epoch, lr });
            }
            opt.step(&mut net, cfg, lr, hook);
            hook.after_step(&mut net);
        }
        net.clear_caches();
        hook.end_epoch(&mut net, epoch);
        let score = evaluate(&net, val_set.unwrap_or(train_set))?;
        if !score.is_finite() {
            return Err(TrainError::Divergence { epoch, lr });
        }
        trace.push(score);
        if cfg.keep_best && best.as_ref().is_none_or(|(b, ..)| score < *b) {
            best = Some((score, epoch, net.clone()));
        }
    }
    let (net, best_epoch) = match best {
        Some((_, e, n)) => (n, e),
        None => (net, cfg.epochs.saturating_sub(1)),
    };
    Ok(TrainOutcome { net, trace, best_epoch })
}

/// Train one model per leave-one-subject-out partition and report the
/// per-subject test MAE.
pub fn crossval_loso(
    builder: &dyn Fn() -> Network,
    windows: &WindowSet,
    n_folds: usize,
    cfg: &TrainConfig,
) -> Result<Metrics, TrainError> {
    let parts = split_loso(windows, n_folds, cfg.seed)?;
    let mut per_subject = BTreeMap::new();
    for part in &parts {
        let train_raw = windows.subset(&part.train);
        let norm = Normalizer::fit(&train_raw);
        let train_set = norm.apply(&train_raw);
        let val = norm.apply(&windows.subset(&part.validation));
        let test = norm.apply(&windows.subset(&part.test));
        let seen: Vec<String> = WindowSet::concat([&train_set, &val]).subjects();
        if seen.contains(&part.test_subject) || test.subjects() != [part.test_subject.clone()] {
            return Err(TrainError::Protocol(format!("subject {} leaks into training", part.test_subject)));
        }
        let mut net = builder();
        init_output_bias(&mut net, &train_set.targets);
        let out = train(net, &train_set, Some(&val), cfg, &mut NoHook)?;
        per_subject.insert(part.test_subject.clone(), evaluate(&out.net, &test)?);
    }
    let mae_bpm = per_subject.values().sum::<f64>() / per_subject.len() as f64;
    Ok(Metrics { mae_bpm, per_subject })
}

/// Start the final layer at the mean training target so early epochs are
/// not spent learning the offset.
pub fn init_output_bias(net: &mut Network, targets: &[f64]) {
    if targets.is_empty() {
        return;
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    if let Some(crate::tcn::Layer::Linear(l)) = net.layers.iter_mut().rev().find(|l| matches!(l, crate::tcn::Layer::Linear(_))) {
        l.bias.value[0] = mean;
    }
}

/// Minimum windows for a fine-tuning run.
pub const FINE_TUNE_MIN_WINDOWS: usize = 8;

/// Fine-tune on the first 25% of one subject's (time-ordered) windows at
/// `lr * lr_finetune_scale`, with batch-norm statistics frozen, and report
/// MAE on the remaining 75%.
pub fn fine_tune(net: Network, subject_windows: &WindowSet, cfg: &TrainConfig) -> Result<(Network, Metrics), TrainError> {
    let subjects = subject_windows.subjects();
    if subjects.len() != 1 {
        return Err(TrainError::Protocol(format!("fine-tuning needs one subject, got {}", subjects.len())));
    }
    let n = subject_windows.len();
    if n < FINE_TUNE_MIN_WINDOWS {
        return Err(TrainError::Protocol(format!("fine-tuning needs >= {FINE_TUNE_MIN_WINDOWS} windows, got {n}")));
    }
    let cut = n / 4;
    let head: Vec<usize> = (0..cut).collect();
    let tail: Vec<usize> = (cut..n).collect();
    let tune = subject_windows.subset(&head);
    let eval = subject_windows.subset(&tail);
    let lr = cfg.lr * cfg.lr_finetune_scale;
    let tuned = train_with_mode(net, &tune, None, cfg, &mut NoHook, lr, Mode::FrozenStats)?.net;
    let mae_bpm = evaluate(&tuned, &eval)?;
    let per_subject = BTreeMap::from([(subjects[0].clone(), mae_bpm)]);
    Ok((tuned, Metrics { mae_bpm, per_subject }))
}

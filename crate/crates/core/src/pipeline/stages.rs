use super::report::{merge_and_report, save_stage, Failure, ManifestEntry, Report};
use super::{prepare_data, FlowConfig, PipelineError, Workspace};
use crate::data::WindowSet;
use crate::deploy::{pareto_front, CandidateModel, CostAxis, LayerCost, Provenance};
use crate::nas::channels::{attach_channel_masks, expand_uniform, extract_arch, MnHook};
use crate::nas::dilation::{attach_gates, extract_dilation, PitHook};
use crate::numerics::Rng64;
use crate::quant::{assign_precisions, fix_precisions, normalize_bn_signs, prepare_quant, qat_train, QatHook};
use crate::runtime::{from_network, model_bytes, run_inference, LayerKind, QModel, RuntimeError};
use crate::tcn::{build_seed, count_macs, count_params, Network};
use crate::train::{evaluate, init_output_bias, mae, train, NoHook, TrainHook};
use std::path::Path;

/// A candidate with the network it came from. Quantized candidates carry
/// the prepared fake-quant network and the folded integer model.
#[derive(Clone, Debug)]
pub struct Artifact {
    pub entry: ManifestEntry,
    pub net: Network,
    pub qmodel: Option<QModel>,
}

impl Artifact {
    pub fn id(&self) -> &str {
        &self.entry.candidate.id
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageOutput {
    pub artifacts: Vec<Artifact>,
    pub failures: Vec<Failure>,
}

impl StageOutput {
    fn record(&mut self, stage: &str, lambda: f64, parent: &str, r: Result<Artifact, PipelineError>) {
        match r {
            Ok(a) => self.artifacts.push(a),
            Err(e) => self.failures.push(Failure {
                stage: stage.into(),
                lambda,
                parent: parent.into(),
                error: e.to_string(),
            }),
        }
    }
}

/// `n` items spread evenly by rank, always including both ends.
pub fn pick_evenly<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    let mut idx: Vec<usize> = (0..n).map(|i| (i * (items.len() - 1) + (n - 1) / 2) / (n - 1)).collect();
    idx.dedup();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Members of `arts` on the Pareto front, by increasing cost.
pub fn front_of(arts: &[Artifact], axis: CostAxis) -> Vec<Artifact> {
    let cands: Vec<CandidateModel> = arts.iter().map(|a| a.entry.candidate.clone()).collect();
    pareto_front(&cands, axis)
        .iter()
        .filter_map(|c| arts.iter().find(|a| a.id() == c.id).cloned())
        .collect()
}

fn float_artifact(id: String, stage: &str, lambda: f64, parent: Option<&str>, net: Network, ws: &Workspace) -> Result<Artifact, PipelineError> {
    let params = count_params(&net);
    let candidate = CandidateModel {
        id,
        mae_bpm: evaluate(&net, &ws.test)?,
        bytes: 4 * params as u64,
        macs: count_macs(&net, net.in_len)? as u64,
        layers: vec![],
        provenance: Provenance { stage: stage.into(), lambda, parent: parent.map(str::to_string) },
    };
    Ok(Artifact { entry: ManifestEntry { candidate, params, float_mae: None, artifacts: vec![] }, net, qmodel: None })
}

fn fit(net: Network, ws: &Workspace, cfg: &FlowConfig, epochs: usize, salt: u64, hook: &mut dyn TrainHook, keep_best: bool) -> Result<Network, PipelineError> {
    if epochs == 0 {
        return Ok(net);
    }
    let tc = crate::train::TrainConfig { keep_best, ..cfg.stage_train(epochs, salt) };
    Ok(train(net, &ws.train, Some(&ws.val), &tc, hook)?.net)
}

pub fn run_stage_seed(cfg: &FlowConfig, ws: &Workspace) -> Result<Artifact, PipelineError> {
    let mut net = build_seed(&cfg.seed_net, cfg.seed);
    init_output_bias(&mut net, &ws.train.targets);
    let net = fit(net, ws, cfg, cfg.train.epochs, 1, &mut NoHook, true)?;
    float_artifact("seed".into(), "seed", 0.0, None, net, ws)
}

/// One masked-training run per channel-search lambda, each followed by
/// extraction and fine-tuning.
pub fn run_stage_channels(cfg: &FlowConfig, ws: &Workspace, seed: &Artifact) -> StageOutput {
    let mut out = StageOutput::default();
    for (i, &lambda) in cfg.mn_lambdas.iter().enumerate() {
        let salt = 100 + i as u64;
        let r = (|| {
            let mut net = seed.net.clone();
            attach_channel_masks(&mut net);
            let (mode, mask_lr_scale) = (cfg.mn.cost_mode, cfg.mn.mask_lr_scale);
            let mut warm = MnHook { lambda: 0.0, mode, mask_lr_scale: 1.0 };
            let net = fit(net, ws, cfg, cfg.warmup_epochs, salt, &mut warm, false)?;
            let net = fit(net, ws, cfg, cfg.search_epochs, salt + 1000, &mut MnHook { lambda, mode, mask_lr_scale }, false)?;
            let mut net = extract_arch(&net, cfg.mn.tau)?;
            if cfg.mn.omega > 1.0 {
                net = expand_uniform(&net, cfg.mn.omega, &mut Rng64::new(cfg.seed ^ salt))?;
            }
            let net = fit(net, ws, cfg, cfg.finetune_epochs, salt + 2000, &mut NoHook, true)?;
            float_artifact(format!("mn{i}"), "channels", lambda, Some(seed.id()), net, ws)
        })();
        out.record("channels", lambda, seed.id(), r);
    }
    out
}

/// Dilation search from `n` members of the channel-stage front across the
/// lambda grid.
pub fn run_stage_dilation(cfg: &FlowConfig, ws: &Workspace, channel_front: &[Artifact]) -> StageOutput {
    let mut out = StageOutput::default();
    for (s, parent) in pick_evenly(channel_front, cfg.pit_seeds).iter().enumerate() {
        for (i, &lambda) in cfg.pit_lambdas.iter().enumerate() {
            let salt = 10_000 + 100 * s as u64 + i as u64;
            let r = (|| {
                let mut net = parent.net.clone();
                if attach_gates(&mut net) == 0 {
                    return Err(PipelineError::Config(format!("{} has no gateable conv layers", parent.id())));
                }
                let mut hook = PitHook { lambda, mode: cfg.pit_cost_mode, gate_lr_scale: cfg.gate_lr_scale };
                let net = fit(net, ws, cfg, cfg.search_epochs, salt, &mut hook, false)?;
                let net = extract_dilation(&net);
                let net = fit(net, ws, cfg, cfg.finetune_epochs, salt + 1000, &mut NoHook, true)?;
                float_artifact(format!("pit{s}-{i}"), "dilation", lambda, Some(parent.id()), net, ws)
            })();
            out.record("dilation", lambda, parent.id(), r);
        }
    }
    out
}

/// MAE of the integer model on a normalized window set.
pub fn qmodel_mae(model: &QModel, ws: &WindowSet) -> Result<f64, RuntimeError> {
    let mut pred = Vec::with_capacity(ws.len());
    let mut x = vec![0.0f64; WindowSet::WINDOW_SIZE];
    for i in 0..ws.len() {
        x.iter_mut().zip(ws.window(i)).for_each(|(d, s)| *d = *s as f64);
        pred.push(run_inference(model, &x)?);
    }
    Ok(mae(&pred, &ws.targets))
}

/// Per compute layer MACs with (weight bits, input activation bits).
pub fn layer_costs(model: &QModel, t_in: usize) -> Vec<LayerCost> {
    let mut t = t_in;
    let mut out = Vec::new();
    for l in &model.layers {
        let t_out = l.out_len(t);
        let macs = match l.kind {
            LayerKind::AvgPool => None,
            LayerKind::Linear | LayerKind::LinearRelu => Some(l.c_in * l.c_out),
            _ => Some(l.c_out * t_out * l.k * l.c_in),
        };
        if let Some(m) = macs {
            out.push(LayerCost { macs: m as u64, weight_bits: l.weight_bits, act_bits: l.in_q.bits });
        }
        t = t_out;
    }
    out
}

/// Quantize a float network: uniform QAT over one format, or a precision
/// search (`lambda`) followed by QAT at the chosen widths.
fn quantize(
    cfg: &FlowConfig,
    ws: &Workspace,
    parent: &Artifact,
    formats: &[u8],
    search: Option<f64>,
    id: String,
    salt: u64,
) -> Result<Artifact, PipelineError> {
    let mut net = parent.net.clone();
    normalize_bn_signs(&mut net);
    let mut q = prepare_quant(&net, formats);
    let (stage, lambda) = match search {
        Some(lambda) => {
            let base = cfg.stage_train(cfg.search_epochs, salt);
            let tc = crate::train::TrainConfig { keep_best: false, lr: base.lr * cfg.qat_lr_scale, ..base };
            q = qat_train(q, &ws.train, Some(&ws.val), &tc, &mut QatHook { lambda, search: true })?.net;
            let p = assign_precisions(&q);
            fix_precisions(&mut q, &p);
            ("mixed", lambda)
        }
        None => ("quant", 0.0),
    };
    let base = cfg.stage_train(cfg.qat_epochs, salt + 1000);
    let tc = crate::train::TrainConfig { lr: base.lr * cfg.qat_lr_scale, ..base };
    let q = qat_train(q, &ws.train, Some(&ws.val), &tc, &mut QatHook { lambda: 0.0, search: false })?.net;
    let fq_mae = evaluate(&q, &ws.test)?;
    let qm = from_network(&q)?;
    let layers = layer_costs(&qm, q.in_len);
    let candidate = CandidateModel {
        id,
        mae_bpm: qmodel_mae(&qm, &ws.test)?,
        bytes: model_bytes(&qm) as u64,
        macs: layers.iter().map(|l| l.macs).sum(),
        layers,
        provenance: Provenance { stage: stage.into(), lambda, parent: Some(parent.id().to_string()) },
    };
    let entry = ManifestEntry { candidate, params: parent.entry.params, float_mae: Some(fq_mae), artifacts: vec![] };
    Ok(Artifact { entry, net: q, qmodel: Some(qm) })
}

/// Uniform QAT of every architecture-front member at each format, then
/// mixed-precision search on `edmips_picks` members.
pub fn run_stage_quant(cfg: &FlowConfig, ws: &Workspace, arch_front: &[Artifact]) -> StageOutput {
    let mut out = StageOutput::default();
    let mut formats = cfg.quant_formats.clone();
    formats.sort_unstable_by(|a, b| b.cmp(a));
    for (m, parent) in arch_front.iter().enumerate() {
        for &b in &formats {
            let id = format!("{}-w{b}a{b}", parent.id());
            let r = quantize(cfg, ws, parent, &[b], None, id, 20_000 + 10 * m as u64 + b as u64);
            out.record("quant", 0.0, parent.id(), r);
        }
    }
    if formats.len() > 1 {
        for (p, parent) in pick_evenly(arch_front, cfg.edmips_picks).iter().enumerate() {
            for (i, &lambda) in cfg.edmips_lambdas.iter().enumerate() {
                let id = format!("{}-mp{i}", parent.id());
                let r = quantize(cfg, ws, parent, &cfg.quant_formats, Some(lambda), id, 30_000 + 100 * p as u64 + i as u64);
                out.record("mixed", lambda, parent.id(), r);
            }
        }
    }
    out
}

/// The whole flow. Stage results and the report are written under `out`
/// when given.
pub fn run_flow(cfg: &FlowConfig, out: Option<&Path>) -> Result<Report, PipelineError> {
    cfg.validate()?;
    let ws = prepare_data(cfg)?;
    let seed = run_stage_seed(cfg, &ws)?;
    let seed_out = StageOutput { artifacts: vec![seed.clone()], failures: vec![] };
    let channels = run_stage_channels(cfg, &ws, &seed);
    let mut arch: Vec<Artifact> = vec![seed];
    arch.extend(channels.artifacts.iter().cloned());
    let dilation = run_stage_dilation(cfg, &ws, &front_of(&arch, CostAxis::Bytes));
    arch.extend(dilation.artifacts.iter().cloned());
    let quant = run_stage_quant(cfg, &ws, &front_of(&arch, CostAxis::Bytes));
    let stages = [("seed", seed_out), ("channels", channels), ("dilation", dilation), ("quant", quant)];
    if let Some(dir) = out {
        for (name, s) in &stages {
            save_stage(dir, name, s, &ws.norm)?;
        }
    }
    let all: Vec<StageOutput> = stages.into_iter().map(|(_, s)| s).collect();
    merge_and_report(&all, cfg, out)
}

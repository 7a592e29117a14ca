//! End-to-end exploration flow: seed training, channel search, dilation
//! search, quantization, and the merged Pareto report.

mod postprocess;
mod report;
mod stages;

pub use postprocess::{postprocess_all, PostProcState, BAND_FRACTION, HISTORY_LEN};
pub use report::{
    config_hash, load_stage, load_stages, merge_and_report, read_front_csv, save_stage, svg_scatter, write_front_csv,
    Failure, ManifestEntry, Report, RunManifest, StageRecord, CSV_HEADER,
};
pub use stages::{
    front_of, layer_costs, pick_evenly, qmodel_mae, run_flow, run_stage_channels, run_stage_dilation, run_stage_quant, run_stage_seed, Artifact,
    StageOutput,
};

use crate::data::{load_record, make_windows, split_loso, synth_generate, DataError, Normalizer, SynthConfig, WindowSet};
use crate::deploy::DeployError;
use crate::nas::channels::MnConfig;
use crate::nas::{CostMode, NasError};
use crate::runtime::RuntimeError;
use crate::tcn::{SeedConfig, TcnError};
use crate::train::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Json { path: PathBuf, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nas(#[from] NasError),
    #[error(transparent)]
    Tcn(#[from] TcnError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
}

impl PipelineError {
    /// Whether the failure comes from bad user input rather than a failed
    /// computation.
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Config(_) | PipelineError::Input(_) | PipelineError::Json { .. } => true,
            PipelineError::Data(e) => !matches!(e, DataError::Io { .. }),
            PipelineError::Train(TrainError::Config(_)) | PipelineError::Nas(NasError::Config(_)) => true,
            PipelineError::Deploy(DeployError::Profile(_)) => true,
            PipelineError::Runtime(RuntimeError::Format { .. } | RuntimeError::Invalid(_) | RuntimeError::Shape(_)) => true,
            _ => false,
        }
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let path = path.into();
    move |source| PipelineError::Io { path, source }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    /// Signal CSVs, each with a `<stem>.labels.csv` companion.
    Files { paths: Vec<PathBuf> },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub data: DataSource,
    pub seed_net: SeedConfig,
    /// Seed training; also supplies lr, batch size and optimizer for every
    /// later stage.
    pub train: TrainConfig,
    /// LOSO folds used to pick validation subjects.
    pub n_folds: usize,
    /// Which subject (in sorted order) is held out for testing.
    pub test_subject: usize,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    pub qat_epochs: usize,
    /// Learning-rate multiplier for QAT and precision search, which start
    /// from an already trained network.
    pub qat_lr_scale: f64,
    pub mn: MnConfig,
    pub mn_lambdas: Vec<f64>,
    pub pit_lambdas: Vec<f64>,
    pub pit_cost_mode: CostMode,
    pub pit_seeds: usize,
    pub gate_lr_scale: f64,
    pub quant_formats: Vec<u8>,
    pub edmips_lambdas: Vec<f64>,
    pub edmips_picks: usize,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            seed_net: SeedConfig::default(),
            train: TrainConfig::default(),
            n_folds: 4,
            test_subject: 0,
            warmup_epochs: 10,
            search_epochs: 20,
            finetune_epochs: 10,
            qat_epochs: 10,
            qat_lr_scale: 0.1,
            mn: MnConfig::default(),
            mn_lambdas: log_grid(1e-6, 1e-3, 8),
            pit_lambdas: log_grid(1e-9, 5e-3, 10),
            pit_cost_mode: CostMode::Size,
            pit_seeds: 4,
            gate_lr_scale: 10.0,
            quant_formats: vec![2, 4, 8],
            edmips_lambdas: log_grid(1e-5, 1e-3, 5),
            edmips_picks: 4,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.mn_lambdas.is_empty() || self.pit_lambdas.is_empty() || self.edmips_lambdas.is_empty() {
            return bad("lambda grids must be non-empty");
        }
        let all = self.mn_lambdas.iter().chain(&self.pit_lambdas).chain(&self.edmips_lambdas);
        if all.clone().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambdas must be finite and >= 0");
        }
        if self.pit_seeds < 2 || self.edmips_picks < 2 {
            return bad("pit_seeds and edmips_picks must be >= 2");
        }
        if self.quant_formats.is_empty() || self.quant_formats.iter().any(|b| !crate::quant::FORMATS.contains(b)) {
            return bad("quant_formats must be a non-empty subset of {2, 4, 8}");
        }
        if !(self.gate_lr_scale > 0.0 && self.qat_lr_scale > 0.0) {
            return bad("gate_lr_scale and qat_lr_scale must be > 0");
        }
        self.seed_net.validate().map_err(PipelineError::Config)?;
        self.train.validate()?;
        self.mn.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    /// Training config for one stage, with its own derived seed.
    pub fn stage_train(&self, epochs: usize, salt: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..self.train.clone()
        }
    }
}

/// Normalized train/validation/test windows for one held-out subject.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub norm: Normalizer,
    pub test_subject: String,
}

pub fn load_windows(src: &DataSource, seed: u64) -> Result<WindowSet, PipelineError> {
    let records = match src {
        DataSource::Synthetic(s) => synth_generate(&SynthConfig { seed: s.seed ^ seed, ..s.clone() })?,
        DataSource::Files { paths } => paths.iter().map(|p| load_record(p)).collect::<Result<_, _>>()?,
    };
    let sets = records.iter().map(make_windows).collect::<Result<Vec<_>, _>>()?;
    Ok(WindowSet::concat(&sets))
}

pub fn prepare_data(cfg: &FlowConfig) -> Result<Workspace, PipelineError> {
    let all = load_windows(&cfg.data, cfg.seed)?;
    let parts = split_loso(&all, cfg.n_folds, cfg.seed)?;
    let part = parts
        .get(cfg.test_subject)
        .ok_or_else(|| PipelineError::Config(format!("test_subject {} but only {} subjects", cfg.test_subject, parts.len())))?;
    let train_raw = all.subset(&part.train);
    let norm = Normalizer::fit(&train_raw);
    Ok(Workspace {
        train: norm.apply(&train_raw),
        val: norm.apply(&all.subset(&part.validation)),
        test: norm.apply(&all.subset(&part.test)),
        norm,
        test_subject: part.test_subject.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        let g = log_grid(1e-6, 1e-3, 4);
        assert_eq!(g.len(), 4);
        assert!((g[1] - 1e-5).abs() < 1e-18);
        assert!((g[3] - 1e-3).abs() < 1e-15);
        assert_eq!(log_grid(1.0, 2.0, 1), vec![1.0]);
    }

    #[test]
    fn config_defaults_validate() {
        FlowConfig::default().validate().unwrap();
        let cfg = FlowConfig { pit_seeds: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = FlowConfig { mn_lambdas: vec![], ..Default::default() };
        assert!(cfg.validate().is_err());
        let back: FlowConfig = serde_json::from_str(&serde_json::to_string(&FlowConfig::default()).unwrap()).unwrap();
        assert_eq!(back, FlowConfig::default());
    }
}

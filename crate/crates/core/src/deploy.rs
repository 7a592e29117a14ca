//! Pareto selection and the MCU deployment model: flash, latency and energy.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DeployError {
    #[error("platform profile error: {0}")]
    Profile(String),
    #[error("model {model} misses the real-time constraint: {latency_s:.3} s > {window_s} s")]
    RealTime { model: String, latency_s: f64, window_s: f64 },
}

/// Calibrated int8 throughput: 17.5M MACs in 1.90 s.
pub const INT8_MACS_PER_S: f64 = 17.5e6 / 1.90;

/// Relative throughput of the narrower kernels. Uncalibrated; int4 and int2
/// are slower than int8 because of the unpacking overhead.
const NARROW_FACTOR: [(u8, f64); 3] = [(8, 1.0), (4, 0.8), (2, 0.7)];

pub fn throughput_key(weight_bits: u8, act_bits: u8) -> String {
    format!("{weight_bits}x{act_bits}")
}

pub fn default_throughput() -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for &(w, fw) in &NARROW_FACTOR {
        for &(a, fa) in &NARROW_FACTOR {
            m.insert(throughput_key(w, a), INT8_MACS_PER_S * fw.min(fa));
        }
    }
    m
}

fn default_fraction() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    pub flash_bytes: u64,
    #[serde(default = "default_fraction")]
    pub flash_fraction: f64,
    pub p_active_mw: f64,
    pub p_idle_mw: f64,
    pub p_stop_mw: f64,
    pub sensor_ppg_mw: f64,
    pub sensor_imu_mw: f64,
    pub t_comm_ms: f64,
    pub window_s: f64,
    /// MACs per second keyed by `"<weight bits>x<act bits>"`.
    #[serde(default = "default_throughput")]
    pub throughput_macs_per_s: BTreeMap<String, f64>,
}

const BUNDLED: [(&str, &str); 3] = [
    ("stm32wb", include_str!("../profiles/stm32wb.json")),
    ("mkv4", include_str!("../profiles/mkv4.json")),
    ("stm32l0", include_str!("../profiles/stm32l0.json")),
];

impl PlatformProfile {
    pub fn from_json(s: &str) -> Result<Self, DeployError> {
        let p: Self = serde_json::from_str(s).map_err(|e| DeployError::Profile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn bundled(name: &str) -> Result<Self, DeployError> {
        let (_, json) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| DeployError::Profile(format!("no bundled profile named {name}")))?;
        Self::from_json(json)
    }

    pub fn bundled_names() -> Vec<&'static str> {
        BUNDLED.iter().map(|(n, _)| *n).collect()
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        let powers = [self.p_active_mw, self.p_idle_mw, self.p_stop_mw, self.sensor_ppg_mw, self.sensor_imu_mw, self.t_comm_ms];
        if powers.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DeployError::Profile("powers and times must be finite and >= 0".into()));
        }
        if !(self.window_s > 0.0) {
            return Err(DeployError::Profile("window_s must be > 0".into()));
        }
        if !(self.flash_fraction > 0.0 && self.flash_fraction <= 1.0) {
            return Err(DeployError::Profile("flash_fraction must be in (0, 1]".into()));
        }
        if self.throughput_macs_per_s.values().any(|t| !(*t > 0.0)) {
            return Err(DeployError::Profile("throughputs must be > 0".into()));
        }
        Ok(())
    }

    pub fn flash_budget(&self) -> f64 {
        self.flash_fraction * self.flash_bytes as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub macs: u64,
    pub weight_bits: u8,
    pub act_bits: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub lambda: f64,
    pub parent: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    pub id: String,
    pub mae_bpm: f64,
    pub bytes: u64,
    pub macs: u64,
    /// Per compute layer; empty means "all int8".
    #[serde(default)]
    pub layers: Vec<LayerCost>,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostAxis {
    Bytes,
    Macs,
}

impl CostAxis {
    pub fn of(self, c: &CandidateModel) -> u64 {
        match self {
            CostAxis::Bytes => c.bytes,
            CostAxis::Macs => c.macs,
        }
    }
}

/// Non-dominated candidates sorted by increasing cost (strictly decreasing
/// MAE). Exact duplicates keep the lowest id; non-finite MAEs are dropped.
pub fn pareto_front(candidates: &[CandidateModel], axis: CostAxis) -> Vec<CandidateModel> {
    let mut sorted: Vec<&CandidateModel> = candidates.iter().filter(|c| c.mae_bpm.is_finite()).collect();
    sorted.sort_by(|a, b| {
        axis.of(a)
            .cmp(&axis.of(b))
            .then(a.mae_bpm.total_cmp(&b.mae_bpm))
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut best = f64::INFINITY;
    let mut out = Vec::new();
    for c in sorted {
        if c.mae_bpm < best {
            best = c.mae_bpm;
            out.push(c.clone());
        }
    }
    out
}

pub fn estimate_latency(model: &CandidateModel, prof: &PlatformProfile) -> Result<f64, DeployError> {
    let fallback = [LayerCost { macs: model.macs, weight_bits: 8, act_bits: 8 }];
    let layers: &[LayerCost] = if model.layers.is_empty() { &fallback } else { &model.layers };
    let mut s = 0.0;
    for l in layers {
        let key = throughput_key(l.weight_bits, l.act_bits);
        let tp = prof
            .throughput_macs_per_s
            .get(&key)
            .ok_or_else(|| DeployError::Profile(format!("profile {} has no throughput for {key}", prof.name)))?;
        s += l.macs as f64 / tp;
    }
    Ok(s)
}

/// Energy over one estimation window, in mJ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub latency_s: f64,
    pub inference_mj: f64,
    pub comm_mj: f64,
    pub sensors_mj: f64,
    pub stop_mj: f64,
}

impl EnergyBreakdown {
    pub fn window_mj(&self) -> f64 {
        self.inference_mj + self.comm_mj + self.sensors_mj + self.stop_mj
    }
}

pub fn inference_energy_mj(p_active_mw: f64, latency_s: f64) -> f64 {
    p_active_mw * latency_s
}

pub fn sensor_energy_mj(prof: &PlatformProfile) -> (f64, f64) {
    (prof.sensor_ppg_mw * prof.window_s, prof.sensor_imu_mw * prof.window_s)
}

pub fn estimate_energy(model: &CandidateModel, prof: &PlatformProfile) -> Result<EnergyBreakdown, DeployError> {
    let latency_s = estimate_latency(model, prof)?;
    if latency_s > prof.window_s {
        return Err(DeployError::RealTime { model: model.id.clone(), latency_s, window_s: prof.window_s });
    }
    let comm_s = prof.t_comm_ms / 1000.0;
    let (ppg, imu) = sensor_energy_mj(prof);
    Ok(EnergyBreakdown {
        latency_s,
        inference_mj: inference_energy_mj(prof.p_active_mw, latency_s),
        comm_mj: prof.p_idle_mw * comm_s,
        sensors_mj: ppg + imu,
        stop_mj: prof.p_stop_mw * (prof.window_s - latency_s - comm_s).max(0.0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Fit(CandidateModel),
    NoFit,
}

/// Most accurate candidate that fits the flash budget and the real-time
/// window. Ties go to fewer bytes, then the lower id.
pub fn select_for_device(front: &[CandidateModel], prof: &PlatformProfile) -> Selection {
    let budget = prof.flash_budget();
    front
        .iter()
        .filter(|c| c.bytes as f64 <= budget)
        .filter(|c| estimate_latency(c, prof).is_ok_and(|l| l <= prof.window_s))
        .min_by(|a, b| a.mae_bpm.total_cmp(&b.mae_bpm).then(a.bytes.cmp(&b.bytes)).then_with(|| a.id.cmp(&b.id)))
        .map_or(Selection::NoFit, |c| Selection::Fit(c.clone()))
}

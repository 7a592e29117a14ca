//! Synthetic PPG + accelerometer recordings with a known heart-rate track.

use super::{DataError, Label, SignalRecord, BPM_MAX, BPM_MIN, SAMPLE_RATE_HZ, WINDOW_LEN, WINDOW_SHIFT};
use crate::numerics::Rng64;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub duration_s: f64,
    pub hr_range: (f64, f64),
    pub harmonic_gains: Vec<f64>,
    pub motion_gain: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 2,
            duration_s: 600.0,
            hr_range: (55.0, 165.0),
            harmonic_gains: vec![1.0, 0.4],
            motion_gain: 0.5,
            noise_std: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.hr_range;
        if !(lo > BPM_MIN && hi < BPM_MAX && lo <= hi) {
            return Err(DataError::Config(format!("hr_range ({lo}, {hi}) must lie within (20, 300)")));
        }
        if !(self.duration_s >= 16.0) {
            return Err(DataError::Config(format!("duration_s {} must be >= 16", self.duration_s)));
        }
        if self.n_subjects == 0 {
            return Err(DataError::Config("n_subjects must be >= 1".into()));
        }
        if self.harmonic_gains.is_empty() {
            return Err(DataError::Config("harmonic_gains must not be empty".into()));
        }
        if self.noise_std < 0.0 || self.motion_gain < 0.0 {
            return Err(DataError::Config("gains and noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Duration that yields exactly `windows` windows per subject.
    pub fn duration_for_windows(windows: usize) -> f64 {
        ((windows.max(1) - 1) * WINDOW_SHIFT + WINDOW_LEN) as f64 / SAMPLE_RATE_HZ
    }
}

/// HR random-walk step std, BPM per second.
const HR_STEP_STD: f64 = 0.5;
const MOTION_COMPONENTS: usize = 6;
const MOTION_BAND_HZ: (f64, f64) = (0.5, 4.0);

/// Sum of random sinusoids in the motion band under a slow amplitude envelope.
struct MotionProcess {
    freqs: Vec<f64>,
    phases: Vec<f64>,
    amps: Vec<f64>,
    env_period_s: f64,
    env_phase: f64,
}

impl MotionProcess {
    fn new(rng: &mut Rng64) -> Self {
        let mut freqs = Vec::with_capacity(MOTION_COMPONENTS);
        let mut phases = Vec::with_capacity(MOTION_COMPONENTS);
        let mut amps = Vec::with_capacity(MOTION_COMPONENTS);
        for _ in 0..MOTION_COMPONENTS {
            freqs.push(rng.uniform(MOTION_BAND_HZ.0, MOTION_BAND_HZ.1));
            phases.push(rng.uniform(0.0, TAU));
            amps.push(rng.normal() / (MOTION_COMPONENTS as f64).sqrt());
        }
        Self { freqs, phases, amps, env_period_s: rng.uniform(30.0, 120.0), env_phase: rng.uniform(0.0, TAU) }
    }

    fn at(&self, t_s: f64) -> f64 {
        let env = 0.5 + 0.5 * (TAU * t_s / self.env_period_s + self.env_phase).sin();
        let s: f64 = self
            .freqs
            .iter()
            .zip(&self.phases)
            .zip(&self.amps)
            .map(|((f, p), a)| a * (TAU * f * t_s + p).sin())
            .sum();
        env * s
    }
}

/// Generate one record per subject, ids `S01`, `S02`, ...
///
/// Labels sit every 2 s at the last sample of each window position and hold
/// the mean HR over the preceding 8 s.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SignalRecord>, DataError> {
    cfg.validate()?;
    let mut master = Rng64::new(cfg.seed);
    let len = (cfg.duration_s * SAMPLE_RATE_HZ).floor() as usize;
    let (lo, hi) = cfg.hr_range;
    let step = HR_STEP_STD / SAMPLE_RATE_HZ.sqrt();

    (0..cfg.n_subjects)
        .map(|s| {
            let mut rng = master.split();
            let motion = MotionProcess::new(&mut rng);
            let axis_own: Vec<MotionProcess> = (0..3).map(|_| MotionProcess::new(&mut rng)).collect();
            let mixing: Vec<f64> = (0..3).map(|_| rng.normal()).collect();

            let mut hr = rng.uniform(lo, hi);
            let mut phase = rng.uniform(0.0, 1.0);
            let mut hr_track = Vec::with_capacity(len);
            let mut channels: [Vec<f32>; 4] = std::array::from_fn(|_| Vec::with_capacity(len));
            for i in 0..len {
                let t = i as f64 / SAMPLE_RATE_HZ;
                let cardiac: f64 = cfg
                    .harmonic_gains
                    .iter()
                    .enumerate()
                    .map(|(k, g)| g * (TAU * (k + 1) as f64 * phase).sin())
                    .sum();
                let m = motion.at(t);
                let noise = rng.normal();
                channels[0].push((cardiac + cfg.motion_gain * m + cfg.noise_std * noise) as f32);
                for a in 0..3 {
                    let n = rng.normal();
                    let v = mixing[a] * m + 0.3 * axis_own[a].at(t) + 0.05 * n;
                    channels[a + 1].push(v as f32);
                }
                hr_track.push(hr);

                phase += hr / 60.0 / SAMPLE_RATE_HZ;
                phase -= phase.floor();
                hr += step * rng.normal();
                if hr > hi {
                    hr = 2.0 * hi - hr;
                }
                if hr < lo {
                    hr = 2.0 * lo - hr;
                }
                hr = hr.clamp(lo, hi);
            }

            let labels = (0..)
                .map(|j| WINDOW_LEN - 1 + j * WINDOW_SHIFT)
                .take_while(|&idx| idx < len)
                .map(|idx| {
                    let span = &hr_track[idx + 1 - WINDOW_LEN..=idx];
                    Label { index: idx, bpm: span.iter().sum::<f64>() / span.len() as f64 }
                })
                .collect();
            SignalRecord::new(format!("S{:02}", s + 1), channels, labels)
        })
        .collect()
}

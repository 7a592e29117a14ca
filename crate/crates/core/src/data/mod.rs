//! PPG + accelerometer records, sliding windows, subject splits and a
//! synthetic signal generator.

mod csv;
mod split;
mod synth;

pub use self::csv::{label_path_for, load_record, load_record_pair, load_signal, write_record};
pub use self::split::{split_loso, Partition};
pub use self::synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

pub const SAMPLE_RATE_HZ: f64 = 32.0;
pub const N_CHANNELS: usize = 4;
/// 8 s at 32 Hz.
pub const WINDOW_LEN: usize = 256;
/// 2 s shift, i.e. 6 s overlap between consecutive windows.
pub const WINDOW_SHIFT: usize = 64;
pub const BPM_MIN: f64 = 20.0;
pub const BPM_MAX: f64 = 300.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub index: usize,
    pub bpm: f64,
}

/// One subject's recording: PPG plus three acceleration axes at 32 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub subject_id: String,
    /// ppg, ax, ay, az
    pub channels: [Vec<f32>; N_CHANNELS],
    pub labels: Vec<Label>,
}

impl SignalRecord {
    pub fn new(
        subject_id: impl Into<String>,
        channels: [Vec<f32>; N_CHANNELS],
        labels: Vec<Label>,
    ) -> Result<Self, DataError> {
        let rec = Self { subject_id: subject_id.into(), channels, labels };
        rec.validate()?;
        Ok(rec)
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let len = self.len();
        if self.channels.iter().any(|c| c.len() != len) {
            return Err(DataError::Schema("channels have unequal lengths".into()));
        }
        for pair in self.labels.windows(2) {
            if pair[1].index <= pair[0].index {
                return Err(DataError::Schema(format!(
                    "label indices not strictly increasing ({} then {})",
                    pair[0].index, pair[1].index
                )));
            }
        }
        for l in &self.labels {
            if !(l.bpm > BPM_MIN && l.bpm < BPM_MAX) {
                return Err(DataError::Schema(format!("bpm {} outside (20, 300)", l.bpm)));
            }
        }
        Ok(())
    }
}

/// Fixed-length input windows with their BPM targets.
///
/// `inputs` is row-major `n x 4 x 256`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub inputs: Vec<f32>,
    pub targets: Vec<f64>,
    pub subject_ids: Vec<String>,
}

impl WindowSet {
    pub const WINDOW_SIZE: usize = N_CHANNELS * WINDOW_LEN;

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f32] {
        &self.inputs[i * Self::WINDOW_SIZE..(i + 1) * Self::WINDOW_SIZE]
    }

    pub fn subset(&self, idx: &[usize]) -> WindowSet {
        let mut out = WindowSet {
            inputs: Vec::with_capacity(idx.len() * Self::WINDOW_SIZE),
            targets: Vec::with_capacity(idx.len()),
            subject_ids: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            out.inputs.extend_from_slice(self.window(i));
            out.targets.push(self.targets[i]);
            out.subject_ids.push(self.subject_ids[i].clone());
        }
        out
    }

    pub fn extend(&mut self, other: &WindowSet) {
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
        self.subject_ids.extend(other.subject_ids.iter().cloned());
    }

    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a WindowSet>) -> WindowSet {
        let mut out = WindowSet::default();
        for s in sets {
            out.extend(s);
        }
        out
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.subject_ids.clone();
        s.sort();
        s.dedup();
        s
    }

    pub fn indices_of(&self, subject: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.subject_ids[i] == subject).collect()
    }
}

/// Cut a record into 8 s windows shifted by 2 s.
///
/// Each window's target is the label nearest to its last sample, with ties
/// going to the later label.
pub fn make_windows(rec: &SignalRecord) -> Result<WindowSet, DataError> {
    let len = rec.len();
    if len < WINDOW_LEN {
        return Err(DataError::EmptyInput(format!(
            "record {} has {} samples, need at least {}",
            rec.subject_id, len, WINDOW_LEN
        )));
    }
    let n = (len - WINDOW_LEN) / WINDOW_SHIFT + 1;
    let mut ws = WindowSet {
        inputs: Vec::with_capacity(n * WindowSet::WINDOW_SIZE),
        targets: Vec::with_capacity(n),
        subject_ids: vec![rec.subject_id.clone(); n],
    };
    for w in 0..n {
        let start = w * WINDOW_SHIFT;
        let end = start + WINDOW_LEN - 1;
        let lo = rec.labels.partition_point(|l| l.index < start);
        let has_inside = rec.labels.get(lo).is_some_and(|l| l.index <= end);
        let label = nearest_label(&rec.labels, end).filter(|_| has_inside);
        let Some(label) = label else {
            return Err(DataError::Schema(format!(
                "record {}: no label inside window [{start}, {end}]",
                rec.subject_id
            )));
        };
        for ch in &rec.channels {
            ws.inputs.extend_from_slice(&ch[start..=end]);
        }
        ws.targets.push(label.bpm);
    }
    Ok(ws)
}

/// Windows of raw channels without targets, flattened `n x 4 x 256`.
pub fn signal_windows(channels: &[Vec<f32>; N_CHANNELS]) -> Vec<f32> {
    let len = channels[0].len();
    if len < WINDOW_LEN {
        return Vec::new();
    }
    let n = (len - WINDOW_LEN) / WINDOW_SHIFT + 1;
    let mut out = Vec::with_capacity(n * WindowSet::WINDOW_SIZE);
    for w in 0..n {
        for ch in channels {
            out.extend_from_slice(&ch[w * WINDOW_SHIFT..w * WINDOW_SHIFT + WINDOW_LEN]);
        }
    }
    out
}

fn nearest_label(labels: &[Label], at: usize) -> Option<Label> {
    if labels.is_empty() {
        return None;
    }
    // first label with index >= at
    let pos = labels.partition_point(|l| l.index < at);
    let after = labels.get(pos);
    let before = pos.checked_sub(1).map(|p| labels[p]);
    match (before, after) {
        (Some(b), Some(a)) => {
            if at - b.index < a.index - at {
                Some(b)
            } else {
                Some(*a)
            }
        }
        (Some(b), None) => Some(b),
        (None, Some(a)) => Some(*a),
        (None, None) => None,
    }
}

/// Per-channel z-score statistics fitted on a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self { mean: [0.0; N_CHANNELS], std: [1.0; N_CHANNELS] }
    }

    pub fn fit(ws: &WindowSet) -> Self {
        let mut sum = [0.0f64; N_CHANNELS];
        let mut sq = [0.0f64; N_CHANNELS];
        let count = (ws.len() * WINDOW_LEN).max(1) as f64;
        for i in 0..ws.len() {
            for (c, chunk) in ws.window(i).chunks_exact(WINDOW_LEN).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let mut mean = [0.0; N_CHANNELS];
        let mut std = [1.0; N_CHANNELS];
        for c in 0..N_CHANNELS {
            mean[c] = sum[c] / count;
            let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    /// Normalize one `4 x 256` window into f64.
    pub fn apply_window(&self, window: &[f32], out: &mut [f64]) {
        for (c, (src, dst)) in window.chunks_exact(WINDOW_LEN).zip(out.chunks_exact_mut(WINDOW_LEN)).enumerate() {
            for (s, d) in src.iter().zip(dst.iter_mut()) {
                *d = (*s as f64 - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn apply(&self, ws: &WindowSet) -> WindowSet {
        let mut out = ws.clone();
        let mut buf = vec![0.0f64; WindowSet::WINDOW_SIZE];
        for (i, chunk) in out.inputs.chunks_exact_mut(WindowSet::WINDOW_SIZE).enumerate() {
            self.apply_window(ws.window(i), &mut buf);
            for (d, s) in chunk.iter_mut().zip(&buf) {
                *d = *s as f32;
            }
        }
        out
    }
}

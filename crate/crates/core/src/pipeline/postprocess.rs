//! Trailing-mean clipping of consecutive HR estimates.

use super::PipelineError;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

pub const HISTORY_LEN: usize = 10;
/// Band half-width as a fraction of the trailing mean.
pub const BAND_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PostProcState {
    history: VecDeque<f64>,
}

impl PostProcState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seed the buffer, e.g. to resume a stream. Keeps the last N values.
    pub fn with_history(values: &[f64]) -> Self {
        let skip = values.len().saturating_sub(HISTORY_LEN);
        Self { history: values[skip..].iter().copied().collect() }
    }

    pub fn history(&self) -> &VecDeque<f64> {
        &self.history
    }

    pub fn trailing_mean(&self) -> Option<f64> {
        (!self.history.is_empty()).then(|| self.history.iter().sum::<f64>() / self.history.len() as f64)
    }

    /// Clip `hr` to `E +- E/10` once two previous outputs exist; the output
    /// (not the raw value) enters the buffer.
    pub fn postprocess(&mut self, hr: f64) -> Result<f64, PipelineError> {
        if !hr.is_finite() {
            return Err(PipelineError::Input(format!("non-finite heart rate {hr}")));
        }
        let out = match self.trailing_mean() {
            Some(e) if self.history.len() >= 2 => {
                let p = e * BAND_FRACTION;
                hr.clamp(e - p, e + p)
            }
            _ => hr,
        };
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(out);
        Ok(out)
    }
}

/// Filter a whole sequence from an empty buffer.
pub fn postprocess_all(values: &[f64]) -> Result<Vec<f64>, PipelineError> {
    let mut s = PostProcState::new();
    values.iter().map(|&v| s.postprocess(v)).collect()
}

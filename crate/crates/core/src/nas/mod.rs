//! Differentiable-mask architecture search over a seed network.

pub mod channels;
pub mod dilation;

use crate::tcn::TcnError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NasError {
    #[error("search config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tcn(#[from] TcnError),
}

/// What a regularizer counts: weights (`Size`) or multiply-accumulates (`Ops`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    #[default]
    Size,
    Ops,
}

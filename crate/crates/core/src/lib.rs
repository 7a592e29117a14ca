//! Design-space exploration of quantized temporal convolutional networks for
//! PPG heart-rate regression, with a bit-exact integer runtime and an MCU
//! deployment cost model.

pub mod data;
pub mod deploy;
pub mod nas;
pub mod numerics;
pub mod pipeline;
pub mod quant;
pub mod runtime;
pub mod tcn;
pub mod train;

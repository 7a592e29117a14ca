use super::{AvgPool, BatchNorm, Conv1d, Layer, Linear, Network};
use crate::numerics::Rng64;
use serde::{Deserialize, Serialize};

/// Geometry of the seed TCN: three conv blocks and a three-layer classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    pub block_channels: Vec<usize>,
    pub layers_per_block: usize,
    /// Stride of the last conv of each block.
    pub block_last_strides: Vec<usize>,
    /// Must be `2^h + 1` so dilation search can reach every power of two.
    pub conv_k: usize,
    pub pool_k: usize,
    pub pool_s: usize,
    /// Hidden FC widths followed by the scalar output.
    pub fc_sizes: Vec<usize>,
    pub in_channels: usize,
    pub in_len: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            block_channels: vec![32, 64, 128],
            layers_per_block: 3,
            block_last_strides: vec![1, 2, 4],
            conv_k: 9,
            pool_k: 2,
            pool_s: 2,
            fc_sizes: vec![128, 64, 1],
            in_channels: 4,
            in_len: 256,
        }
    }
}

impl SeedConfig {
    /// Narrow variant of the default geometry for quick experiments.
    pub fn desk() -> Self {
        Self { block_channels: vec![16, 32, 32], fc_sizes: vec![32, 16, 1], ..Self::default() }
    }

    /// Smallest useful variant, for unit tests.
    pub fn tiny() -> Self {
        Self { block_channels: vec![4, 4, 8], fc_sizes: vec![8, 4, 1], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let h = self.conv_k.checked_sub(1).map(|v| v.trailing_zeros());
        if !matches!(h, Some(h) if h >= 1 && (1usize << h) + 1 == self.conv_k) {
            return Err(format!("conv_k {} is not 2^h + 1", self.conv_k));
        }
        if self.block_channels.len() != self.block_last_strides.len() || self.block_channels.is_empty() {
            return Err("block_channels and block_last_strides must be non-empty and equally long".into());
        }
        if self.layers_per_block == 0 || self.fc_sizes.last() != Some(&1) {
            return Err("need >= 1 layer per block and a final FC size of 1".into());
        }
        Ok(())
    }
}

/// He-normal initial values, std `sqrt(2 / fan_in)`.
pub fn he_normal(n: usize, fan_in: usize, rng: &mut Rng64) -> Vec<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| std * rng.normal()).collect()
}

/// Build the seed network. Convs have dilation 1 and no bias; every conv and
/// hidden FC is followed by batch norm and ReLU.
pub fn build_seed(cfg: &SeedConfig, seed: u64) -> Network {
    if let Err(e) = cfg.validate() {
        panic!("invalid seed config: {e}");
    }
    let mut rng = Rng64::new(seed);
    let mut layers = Vec::new();
    let mut c = cfg.in_channels;
    let mut t = cfg.in_len;
    for (&ch, &last_stride) in cfg.block_channels.iter().zip(&cfg.block_last_strides) {
        for l in 0..cfg.layers_per_block {
            let stride = if l + 1 == cfg.layers_per_block { last_stride } else { 1 };
            let conv = Conv1d::new(c, ch, cfg.conv_k, 1, stride, &mut rng);
            t = conv.out_len(t);
            layers.push(Layer::Conv1d(conv));
            layers.push(Layer::BatchNorm(BatchNorm::new(ch)));
            layers.push(Layer::relu());
            c = ch;
        }
        let pool = AvgPool::new(cfg.pool_k, cfg.pool_s);
        t = pool.out_len(t);
        layers.push(Layer::AvgPool(pool));
    }
    layers.push(Layer::flatten());
    let mut features = c * t;
    let n_fc = cfg.fc_sizes.len();
    for (i, &out) in cfg.fc_sizes.iter().enumerate() {
        layers.push(Layer::Linear(Linear::new(features, out, &mut rng)));
        if i + 1 < n_fc {
            layers.push(Layer::BatchNorm(BatchNorm::new(out)));
            layers.push(Layer::relu());
        }
        features = out;
    }
    Network::new(cfg.in_channels, cfg.in_len, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcn::{count_macs, count_params, Tensor};

    /// Regression constant: trainable parameters of the default seed.
    // convs 1152 + 2*9216 + 18432 + 2*36864 + 73728 + 2*147456, BN 2*(3*32 + 3*64 + 3*128),
    // FC 512*128+128 + 128*64+64 + 64+1, FC BN 2*(128 + 64)
    const SEED_PARAMS: usize = 556_097;

    #[test]
    fn block_lengths() {
        let net = build_seed(&SeedConfig::default(), 0);
        let shapes = net.shapes(256).unwrap();
        let pools: Vec<usize> = net
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l, Layer::AvgPool(_)))
            .map(|(_, s)| s.1)
            .collect();
        assert_eq!(pools, vec![128, 32, 4]);
        net.validate().unwrap();
    }

    #[test]
    fn first_conv_takes_four_channels() {
        let net = build_seed(&SeedConfig::default(), 0);
        match &net.layers[0] {
            Layer::Conv1d(c) => {
                assert_eq!(c.c_in, 4);
                assert_eq!(c.kernel, 9);
                assert_eq!(c.dilation, 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seed_param_count_frozen() {
        let net = build_seed(&SeedConfig::default(), 0);
        assert_eq!(count_params(&net), SEED_PARAMS);
        // rough MACs/params ratio for the seed family
        let ratio = count_macs(&net, 256).unwrap() as f64 / SEED_PARAMS as f64;
        assert!(ratio > 10.0 && ratio < 200.0, "ratio {ratio}");
    }

    #[test]
    fn seed_forward_is_finite() {
        let net = build_seed(&SeedConfig::default(), 1);
        let mut rng = Rng64::new(2);
        let x: Vec<f64> = (0..2 * 4 * 256).map(|_| rng.normal()).collect();
        let y = net.predict(Tensor::new(vec![2, 4, 256], x).unwrap()).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_even_kernel() {
        assert!(SeedConfig { conv_k: 8, ..SeedConfig::default() }.validate().is_err());
        assert!(SeedConfig { conv_k: 5, ..SeedConfig::default() }.validate().is_ok());
    }
}

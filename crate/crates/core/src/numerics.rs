//! Deterministic random numbers and finite-difference gradient checks.

use serde::{Deserialize, Serialize};

/// SplitMix64 generator. Same seed, same stream, on every platform.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng64 {
    state: u64,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in (0, 1], built from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (1.0 - self.next_f64())
    }

    /// Standard normal variate (Box-Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Child generator seeded from the next output of this one.
    pub fn split(&mut self) -> Rng64 {
        Rng64::new(self.next_u64())
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Central-difference gradient of `f` at `x`, evaluated in f64.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor, the comparison used by every
/// gradient check in this crate.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_value() {
        let mut rng = Rng64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng64::new(42);
        let mut b = Rng64::new(42);
        let sa: Vec<u64> = (0..1000).map(|_| a.next_u64()).collect();
        let sb: Vec<u64> = (0..1000).map(|_| b.next_u64()).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(Rng64::new(1).next_u64(), Rng64::new(2).next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng64::new(7);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn uniform_in_half_open_unit() {
        let mut rng = Rng64::new(3);
        for _ in 0..10_000 {
            let u = rng.next_f64();
            assert!(u > 0.0 && u <= 1.0);
        }
    }

    #[test]
    fn fd_square() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_constant_is_zero() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fd_logcosh() {
        let g = finite_diff_grad(|x| x[0].cosh().ln(), &[2.0], 1e-4);
        assert!((g[0] - 2.0f64.tanh()).abs() < 1e-6);
    }

    #[test]
    fn fd_quadratic_exact() {
        // 3x^2 - 2xy + y^2 + 4x - 1
        let f = |v: &[f64]| 3.0 * v[0] * v[0] - 2.0 * v[0] * v[1] + v[1] * v[1] + 4.0 * v[0] - 1.0;
        let (x, y) = (1.5, -0.25);
        let g = finite_diff_grad(f, &[x, y], 1e-3);
        let exact = [6.0 * x - 2.0 * y + 4.0, -2.0 * x + 2.0 * y];
        for (a, b) in g.iter().zip(exact) {
            assert!(((a - b) / b).abs() < 1e-9);
        }
    }
}

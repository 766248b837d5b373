//! Fixtures shared by the benchmarks.

use mcpf_core::{RateMatrix, SlotProblem};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rayleigh-like rates `log2(1 + SNR)` with SNR exponential at 13 dB.
pub fn random_rates(users: usize, channels: usize, seed: u64) -> RateMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = 10f64.powf(1.3);
    Array2::from_shape_fn((users, channels), |_| {
        let snr = -mean * (1.0 - rng.random::<f64>()).ln();
        (1.0 + snr).log2()
    })
}

/// A look-back slot problem with history baselines around the fair share.
pub fn lookback_problem(users: usize, channels: usize, window: usize, seed: u64) -> SlotProblem {
    let rates = random_rates(users, channels, seed);
    let fair = rates.sum() / users as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let baseline = (0..users)
        .map(|_| fair * (window - 1) as f64 / window as f64 * rng.random_range(0.5..1.5))
        .collect();
    SlotProblem::new(rates, baseline, window).unwrap()
}

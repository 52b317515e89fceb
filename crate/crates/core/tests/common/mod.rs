#![allow(dead_code)]

use mfac::synth::rng;
use mfac::{FisherConfig, GradientMatrix};
use rand::Rng;

pub const LAMBDAS: [f64; 3] = [1e-5, 1e-2, 1.0];

/// One member of the random instance family: `d` in `[2, 512]`, `m` in
/// `[1, 128]`, `lambda` from [`LAMBDAS`], Gaussian gradients.
pub struct Instance {
    pub g: GradientMatrix,
    pub cfg: FisherConfig,
    pub seed: u64,
}

pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let d = r.random_range(2..=512);
    let m = r.random_range(1..=128);
    let lambda = LAMBDAS[r.random_range(0..LAMBDAS.len())];
    instance_with(seed, m, d, lambda)
}

pub fn instance_with(seed: u64, m: usize, d: usize, lambda: f64) -> Instance {
    Instance {
        g: mfac::synth::gaussian_gradients(m, d, seed.wrapping_mul(31).wrapping_add(7)).unwrap(),
        cfg: FisherConfig::new(m, lambda, d).unwrap(),
        seed,
    }
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |s, x| s.max(x.abs()))
}

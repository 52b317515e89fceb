//! Seeded synthetic instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::gradients::GradientMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `m` gradients with i.i.d. standard normal entries scaled by `1/sqrt(d)`.
pub fn gaussian_gradients(m: usize, d: usize, seed: u64) -> Result<GradientMatrix> {
    let mut r = rng(seed);
    GradientMatrix::from_flat(m, d, normal_vec(&mut r, m * d, 1.0 / (d as f64).sqrt()))
}

/// Gradients concentrated on a random `rank`-dimensional subspace plus a
/// small isotropic component; gives an ill-conditioned `G G^T`.
pub fn low_rank_gradients(m: usize, d: usize, rank: usize, noise: f64, seed: u64) -> Result<GradientMatrix> {
    let mut r = rng(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let basis: Vec<Vec<f64>> = (0..rank).map(|_| normal_vec(&mut r, d, scale)).collect();
    let mut data = Vec::with_capacity(m * d);
    for _ in 0..m {
        let mut g = normal_vec(&mut r, d, noise * scale);
        for b in &basis {
            let z: f64 = r.sample(StandardNormal);
            crate::linalg::axpy(z, b, &mut g);
        }
        data.extend_from_slice(&g);
    }
    GradientMatrix::from_flat(m, d, data)
}

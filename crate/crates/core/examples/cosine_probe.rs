//! How close is the sliding-window direction to one built from a fresh
//! sample of gradients? Compared with two fresh samples against each other.

use mfac::optimizer::cosine_similarity_probe;
use mfac::synth::{normal_vec, rng};
use mfac::{DynamicSketch, FisherConfig, GradientMatrix};

/// Stationary stream: a fixed mean plus anisotropic noise.
fn draw(count: usize, mean: &[f64], scales: &[f64], seed: u64) -> mfac::Result<GradientMatrix> {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let z = normal_vec(&mut r, mean.len(), 1.0);
            mean.iter().zip(scales).zip(z).map(|((mu, s), z)| mu + s * z).collect()
        })
        .collect();
    GradientMatrix::from_rows(&rows)
}

fn main() -> mfac::Result<()> {
    let (m, d) = (32, 100);
    let cfg = FisherConfig::new(m, 1e-2, d)?;
    let mean = normal_vec(&mut rng(1), d, 0.05);
    let scales: Vec<f64> = (0..d).map(|i| 0.02 + 0.2 * (i % 10) as f64 / 10.0).collect();

    let mut window = DynamicSketch::new(&cfg)?;
    let mut inside = 0;
    let probes = 10;
    for p in 0..probes {
        for g in draw(m, &mean, &scales, 100 + p)?.iter_rows() {
            window.push(g)?;
        }
        let query = draw(1, &mean, &scales, 200 + p)?.into_flat();
        let mut band = (f64::INFINITY, f64::NEG_INFINITY);
        let mut dyn_cos = 0.0;
        for r in 0..20 {
            let a = draw(m, &mean, &scales, 1000 * (p + 1) + 2 * r)?;
            let b = draw(m, &mean, &scales, 1000 * (p + 1) + 2 * r + 1)?;
            let (ds, ss) = cosine_similarity_probe(&window, &a, &b, &query)?;
            band = (band.0.min(ss), band.1.max(ss));
            if r == 0 {
                dyn_cos = ds;
            }
        }
        let ok = band.0 <= dyn_cos && dyn_cos <= band.1;
        inside += usize::from(ok);
        println!("probe {p}: dynamic-vs-static {dyn_cos:.4}, static band [{:.4}, {:.4}]", band.0, band.1);
    }
    println!("{inside}/{probes} probes inside the band");
    Ok(())
}

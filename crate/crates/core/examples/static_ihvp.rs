//! Inverse-Fisher products, elements and the diagonal from a static sketch,
//! compared with the dense inverse.

use mfac::oracle::dense_inverse_direct;
use mfac::synth::{gaussian_gradients, normal_vec, rng};
use mfac::{FisherConfig, InverseCurvature, StaticSketch};

fn main() -> mfac::Result<()> {
    let (m, d) = (32, 256);
    let cfg = FisherConfig::new(m, 1e-3, d)?;
    let g = gaussian_gradients(m, d, 7)?;

    let sketch = StaticSketch::from_gradients(&g, &cfg)?;
    let dense = dense_inverse_direct(&g, &cfg)?;

    let x = normal_vec(&mut rng(1), d, 1.0);
    let fast = sketch.ihvp(&x)?;
    let slow = dense.ihvp(&x)?;
    println!("ihvp relative error     {:.2e}", mfac::linalg::relative_l2(&fast, &slow));

    let diag = sketch.diag();
    let worst = (0..d)
        .map(|i| (diag[i] - dense.element(i, i).unwrap()).abs() / diag[i])
        .fold(0.0, f64::max);
    println!("diag relative error     {worst:.2e}");
    println!("[F^-1]_(3,17) sketch    {:.6e}", sketch.element(3, 17)?);
    println!("[F^-1]_(3,17) dense     {:.6e}", dense.element(3, 17)?);
    println!("smallest denominator    {:.4} (m = {m})", sketch.q().iter().cloned().fold(f64::INFINITY, f64::min));
    Ok(())
}

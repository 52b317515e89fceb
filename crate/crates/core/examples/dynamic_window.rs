//! A sliding window of gradients: fill, replace in FIFO order, checkpoint.

use mfac::oracle::dense_inverse_direct;
use mfac::synth::{gaussian_gradients, normal_vec, rng};
use mfac::{DynamicSketch, FisherConfig, InverseCurvature};

fn main() -> mfac::Result<()> {
    let (m, d) = (16, 200);
    let cfg = FisherConfig::new(m, 1e-2, d)?;
    let mut window = DynamicSketch::new(&cfg)?;
    let stream = gaussian_gradients(3 * m, d, 11)?;

    for (t, g) in stream.iter_rows().enumerate() {
        let direction = window.update_and_ihvp(g)?;
        if t % m == m - 1 {
            let state = window.window_state();
            let dense = dense_inverse_direct(&window.window()?, &cfg)?;
            let err = mfac::linalg::relative_l2(&direction, &dense.ihvp(g)?);
            println!("step {t:3}: filled {} next slot {:2}, error vs dense {err:.2e}", state.filled, state.next_slot);
        }
    }

    let x = normal_vec(&mut rng(2), d, 1.0);
    let dir = std::env::temp_dir().join("mfac-window.mfac");
    window.save(&dir)?;
    let restored = DynamicSketch::load(&dir)?;
    println!("checkpoint round trip identical: {}", restored.ihvp(&x)? == window.ihvp(&x)?);
    std::fs::remove_file(dir)?;
    Ok(())
}

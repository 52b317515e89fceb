//! One-shot and gradual OBS pruning of a quadratic model.

use mfac::pruning::{gradual_prune, prune_step, PruneMode, SparsitySchedule};
use mfac::provider::{GradientProvider, QuadraticProvider};
use mfac::synth::{low_rank_gradients, normal_vec, rng};
use mfac::{FisherConfig, ParamVector};

fn main() -> mfac::Result<()> {
    let (m, d, lambda) = (32, 400, 1e-3);
    let g = low_rank_gradients(m, d, 8, 0.2, 5)?;
    let theta = ParamVector::new(normal_vec(&mut rng(6), d, 1.0))?;
    let model = QuadraticProvider::new(g, lambda, theta.as_slice().to_vec())?;
    let cfg = FisherConfig::new(m, lambda, d)?;

    println!("pruning 40 of {d} weights at once");
    for mode in [PruneMode::ObdNoUpdate, PruneMode::ObsSimultaneous, PruneMode::ObsLinearSolve] {
        let (pruned, _) = prune_step(&theta, &model, &cfg, 40, mode, 1, &[], 0)?;
        println!("  {:9} loss {:.6e}", mode.name(), model.loss(pruned.as_slice())?);
    }
    for recompute in [1, 5] {
        let (pruned, _) = prune_step(&theta, &model, &cfg, 200, PruneMode::ObsSimultaneous, recompute, &[], 0)?;
        println!("half the weights, recompute = {recompute}: loss {:.6e}", model.loss(pruned.as_slice())?);
    }

    let schedule = SparsitySchedule::new(0.0, 0.9, 6, 3.0)?;
    let (sparse, steps) = gradual_prune(&theta, &model, &cfg, &schedule, PruneMode::ObsSimultaneous, 1, 0)?;
    let zeros = sparse.as_slice().iter().filter(|x| **x == 0.0).count();
    println!("gradual schedule: {} steps, {zeros} zeros, loss {:.6e}", steps.len(), model.loss(sparse.as_slice())?);
    Ok(())
}

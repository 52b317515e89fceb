//! Sliding-window preconditioned descent on a logistic-regression toy,
//! against plain gradient descent.

use mfac::optimizer::{gradient_descent, run_training, LrSchedule, OptimizerState, TrainingOptions};
use mfac::provider::LogisticProvider;
use mfac::{FisherConfig, ParamVector};

fn main() -> mfac::Result<()> {
    let (n, d) = (500, 50);
    let toy = LogisticProvider::synthetic(n, d, 4.0, 1e-3, 0)?;
    let cfg = FisherConfig::new(32, 1.0, d)?;

    let mut state = OptimizerState::new(ParamVector::zeros(d), &cfg, LrSchedule::Constant(1.0))?;
    let trace = run_training(&toy, &mut state, 2000, &TrainingOptions::default())?;
    for r in trace.records.iter().step_by(250) {
        println!("step {:4}  loss {:.8}  |g| {:.2e}", r.step, r.loss, r.grad_norm);
    }

    let (_, best) = gradient_descent(&toy, &vec![0.0; d], 1.0, 20_000)?;
    println!("m-fac after 2000 steps  {:.10}", trace.final_loss);
    println!("gd after 20000 steps    {best:.10}");
    let (_, short) = gradient_descent(&toy, &vec![0.0; d], 1.0, 2000)?;
    println!("gd after 2000 steps     {short:.10}");
    Ok(())
}

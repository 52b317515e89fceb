//! Per-call times of the sketch operations and their log-log slopes.

use mfac::bench::{run_bench, Axis, BenchConfig, BenchOp};

fn main() -> mfac::Result<()> {
    let in_d = BenchConfig {
        dims: vec![1 << 12, 1 << 13, 1 << 14, 1 << 15],
        windows: vec![32],
        ops: vec![BenchOp::StaticIhvp, BenchOp::DynamicIhvp, BenchOp::DynamicUpdateIhvp],
        ..BenchConfig::default()
    };
    let in_m = BenchConfig {
        dims: vec![1 << 10],
        windows: vec![16, 32, 64, 128],
        ops: vec![BenchOp::DynamicSetup, BenchOp::DynamicReplace],
        ..BenchConfig::default()
    };
    for cfg in [in_d, in_m] {
        let report = run_bench(&cfg)?;
        for p in &report.points {
            println!("{:20} d={:6} m={:4} median {:10.0} ns", p.op.name(), p.d, p.m, p.median_ns);
        }
        for s in &report.slopes {
            let axis = if s.axis == Axis::D { "d" } else { "m" };
            println!("{:20} slope in {axis}: {:.2}", s.op.name(), s.slope);
        }
    }
    Ok(())
}

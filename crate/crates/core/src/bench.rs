//! Wall-clock scaling measurements for the sketch operations.

use std::io::Write;
use std::time::Instant;

use crate::config::FisherConfig;
use crate::dynamic_sketch::DynamicSketch;
use crate::error::{MfacError, Result};
use crate::static_sketch::StaticSketch;
use crate::synth::{gaussian_gradients, normal_vec, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchOp {
    StaticSetup,
    StaticIhvp,
    DynamicSetup,
    DynamicIhvp,
    DynamicReplace,
    DynamicUpdateIhvp,
}

impl BenchOp {
    pub const ALL: [BenchOp; 6] = [
        BenchOp::StaticSetup,
        BenchOp::StaticIhvp,
        BenchOp::DynamicSetup,
        BenchOp::DynamicIhvp,
        BenchOp::DynamicReplace,
        BenchOp::DynamicUpdateIhvp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::StaticSetup => "static_setup",
            BenchOp::StaticIhvp => "static_ihvp",
            BenchOp::DynamicSetup => "dynamic_setup",
            BenchOp::DynamicIhvp => "dynamic_ihvp",
            BenchOp::DynamicReplace => "dynamic_replace",
            BenchOp::DynamicUpdateIhvp => "dynamic_update_ihvp",
        }
    }
}

impl std::str::FromStr for BenchOp {
    type Err = MfacError;

    fn from_str(s: &str) -> Result<Self> {
        BenchOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| MfacError::Config(format!("unknown benchmark op `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub windows: Vec<usize>,
    pub ops: Vec<BenchOp>,
    pub repetitions: usize,
    pub warmups: usize,
    /// Each sample repeats the operation until at least this much time has passed.
    pub min_sample_ns: u64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: vec![1 << 12, 1 << 13, 1 << 14, 1 << 15, 1 << 16],
            windows: vec![64],
            ops: BenchOp::ALL.to_vec(),
            repetitions: 5,
            warmups: 2,
            min_sample_ns: 2_000_000,
            lambda: 1e-5,
            seed: 0,
        }
    }
}

/// Per-call times of one operation at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchPoint {
    pub op: BenchOp,
    pub d: usize,
    pub m: usize,
    pub samples_ns: Vec<f64>,
    pub median_ns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    D,
    M,
}

/// Least-squares slope of `log(time)` against `log(size)` along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub op: BenchOp,
    pub axis: Axis,
    /// Value of the other size parameter.
    pub fixed: usize,
    pub points: usize,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    pub slopes: Vec<SlopeFit>,
}

impl BenchReport {
    pub fn slope(&self, op: BenchOp, axis: Axis, fixed: usize) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.op == op && s.axis == axis && s.fixed == fixed)
            .map(|s| s.slope)
    }

    /// Raw samples, medians and slopes as one CSV table:
    /// `kind,op,d,m,rep,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "op", "d", "m", "rep", "value"])?;
        for p in &self.points {
            for (r, t) in p.samples_ns.iter().enumerate() {
                w.write_record(["sample_ns", p.op.name(), &p.d.to_string(), &p.m.to_string(), &r.to_string(), &t.to_string()])?;
            }
            w.write_record(["median_ns", p.op.name(), &p.d.to_string(), &p.m.to_string(), "", &p.median_ns.to_string()])?;
        }
        for s in &self.slopes {
            let (kind, d, m) = match s.axis {
                Axis::D => ("slope_d", String::new(), s.fixed.to_string()),
                Axis::M => ("slope_m", s.fixed.to_string(), String::new()),
            };
            w.write_record([kind, s.op.name(), &d, &m, "", &s.slope.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Log-log least-squares slope; `None` with fewer than two distinct sizes.
pub fn loglog_slope(points: &[(usize, f64)]) -> Option<f64> {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if points.len() < 2 || sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Times `f` per call: `warmups` untimed runs, then `reps` samples, each
/// looping until `min_ns` has elapsed.
fn time_op(reps: usize, warmups: usize, min_ns: u64, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let mut calls = 0u64;
        loop {
            f()?;
            calls += 1;
            if start.elapsed().as_nanos() as u64 >= min_ns {
                break;
            }
        }
        samples.push(start.elapsed().as_nanos() as f64 / calls as f64);
    }
    Ok(samples)
}

fn measure(op: BenchOp, d: usize, m: usize, cfg: &BenchConfig) -> Result<Vec<f64>> {
    let fc = FisherConfig::new(m, cfg.lambda, d)?;
    let g = gaussian_gradients(m, d, cfg.seed)?;
    let mut r = rng(cfg.seed.wrapping_add(1));
    let x = normal_vec(&mut r, d, 1.0);
    let (reps, warm, min_ns) = (cfg.repetitions, cfg.warmups, cfg.min_sample_ns);
    match op {
        BenchOp::StaticSetup => time_op(reps, warm, min_ns, || StaticSketch::from_gradients(&g, &fc).map(|_| ())),
        BenchOp::StaticIhvp => {
            let s = StaticSketch::from_gradients(&g, &fc)?;
            time_op(reps, warm, min_ns, || s.ihvp(&x).map(|_| ()))
        }
        BenchOp::DynamicSetup => time_op(reps, warm, min_ns, || DynamicSketch::setup(&g, &fc).map(|_| ())),
        BenchOp::DynamicIhvp => {
            let s = DynamicSketch::setup(&g, &fc)?;
            time_op(reps, warm, min_ns, || s.ihvp(&x).map(|_| ()))
        }
        BenchOp::DynamicReplace => {
            let mut s = DynamicSketch::setup(&g, &fc)?;
            // Slot 0 forces the full trailing recomputation.
            time_op(reps, warm, min_ns, || s.replace_gradient(0, &x))
        }
        BenchOp::DynamicUpdateIhvp => {
            let mut s = DynamicSketch::setup(&g, &fc)?;
            time_op(reps, warm, min_ns, || s.update_and_ihvp(&x).map(|_| ()))
        }
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repetitions < 5 || cfg.dims.is_empty() || cfg.windows.is_empty() {
        return Err(MfacError::Config("benchmark needs a non-empty grid and at least 5 repetitions".into()));
    }
    let mut report = BenchReport::default();
    for &op in &cfg.ops {
        for &m in &cfg.windows {
            for &d in &cfg.dims {
                let samples_ns = measure(op, d, m, cfg)?;
                report.points.push(BenchPoint {
                    op,
                    d,
                    m,
                    median_ns: median(&samples_ns),
                    samples_ns,
                });
            }
        }
    }
    for &op in &cfg.ops {
        let of_op: Vec<&BenchPoint> = report.points.iter().filter(|p| p.op == op).collect();
        for &m in &cfg.windows {
            let pts: Vec<(usize, f64)> = of_op.iter().filter(|p| p.m == m).map(|p| (p.d, p.median_ns)).collect();
            if let Some(slope) = loglog_slope(&pts) {
                report.slopes.push(SlopeFit { op, axis: Axis::D, fixed: m, points: pts.len(), slope });
            }
        }
        for &d in &cfg.dims {
            let pts: Vec<(usize, f64)> = of_op.iter().filter(|p| p.d == d).map(|p| (p.m, p.median_ns)).collect();
            if let Some(slope) = loglog_slope(&pts) {
                report.slopes.push(SlopeFit { op, axis: Axis::M, fixed: d, points: pts.len(), slope });
            }
        }
    }
    Ok(report)
}

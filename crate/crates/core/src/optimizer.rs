//! Sliding-window preconditioned gradient descent.
//!
//! Each step pushes the new gradient into a [`DynamicSketch`] (evicting the
//! oldest once the window is full) and moves along `F^{-1} g` for the
//! updated window. There is no momentum term.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::FisherConfig;
use crate::curvature::check_len;
use crate::dynamic_sketch::DynamicSketch;
use crate::error::{MfacError, Result};
use crate::gradients::{batch_average_gradients, GradientMatrix, ParamVector};
use crate::linalg::{cosine, norm};
use crate::provider::GradientProvider;
use crate::static_sketch::StaticSketch;

/// What the stepper does while the window holds fewer than `m` gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WarmupMode {
    /// Step along the raw gradient until the window is full.
    #[default]
    Passthrough,
    /// Precondition with the occupied slots only, averaging over their count.
    PartialWindow,
}

impl std::str::FromStr for WarmupMode {
    type Err = MfacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "passthrough" => Ok(WarmupMode::Passthrough),
            "partial" | "partial-window" => Ok(WarmupMode::PartialWindow),
            other => Err(MfacError::Config(format!("unknown warmup mode `{other}`"))),
        }
    }
}

/// Learning rate as a function of the step index.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `(first_step, rate)` pairs sorted by step; the first must start at 0.
    Piecewise(Vec<(usize, f64)>),
}

impl LrSchedule {
    fn validate(&self) -> Result<()> {
        let rates: Vec<f64> = match self {
            LrSchedule::Constant(r) => vec![*r],
            LrSchedule::Piecewise(p) => {
                if p.first().map(|e| e.0) != Some(0) || p.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(MfacError::Config("piecewise schedule must start at step 0 and increase".into()));
                }
                p.iter().map(|e| e.1).collect()
            }
        };
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(MfacError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant(r) => *r,
            LrSchedule::Piecewise(p) => p.iter().take_while(|e| e.0 <= step).last().map_or(p[0].1, |e| e.1),
        }
    }
}

/// Parameters, gradient window and step counter of one training run.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    theta: ParamVector,
    sketch: DynamicSketch,
    step: usize,
    lr: LrSchedule,
    warmup: WarmupMode,
    stride: usize,
}

impl OptimizerState {
    pub fn new(theta: ParamVector, cfg: &FisherConfig, lr: LrSchedule) -> Result<Self> {
        Self::from_sketch(theta, DynamicSketch::new(cfg)?, lr)
    }

    /// Resumes from an existing window, e.g. one loaded from a checkpoint.
    pub fn from_sketch(theta: ParamVector, sketch: DynamicSketch, lr: LrSchedule) -> Result<Self> {
        check_len(sketch.config().dim, theta.len())?;
        lr.validate()?;
        Ok(Self {
            theta,
            sketch,
            step: 0,
            lr,
            warmup: WarmupMode::default(),
            stride: 1,
        })
    }

    pub fn with_warmup(mut self, warmup: WarmupMode) -> Self {
        self.warmup = warmup;
        self
    }

    /// Only every `stride`-th gradient enters the window; directions are
    /// still computed at every step.
    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(MfacError::Config("stride must be at least 1".into()));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn sketch(&self) -> &DynamicSketch {
        &self.sketch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn warmup(&self) -> WarmupMode {
        self.warmup
    }

    pub fn in_warmup(&self) -> bool {
        self.warmup == WarmupMode::Passthrough && !self.sketch.is_full()
    }

    /// Takes one step with `grad` and returns the direction that was applied
    /// (before scaling by the learning rate).
    pub fn step_with(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        check_len(self.theta.len(), grad.len())?;
        if let Some(col) = grad.iter().position(|x| !x.is_finite()) {
            return Err(MfacError::NonFinite { row: self.step, col });
        }
        let refresh = self.step.is_multiple_of(self.stride);
        let direction = if refresh {
            if self.warmup == WarmupMode::Passthrough && self.sketch.window_state().filled + 1 < self.sketch.config().m {
                self.sketch.push(grad)?;
                grad.to_vec()
            } else {
                self.sketch.update_and_ihvp(grad)?
            }
        } else if self.in_warmup() {
            grad.to_vec()
        } else {
            self.sketch.ihvp(grad)?
        };
        let eta = self.lr.rate(self.step);
        let theta = self.theta.as_mut_slice();
        for (t, p) in theta.iter_mut().zip(&direction) {
            *t -= eta * p;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(MfacError::Numerical(format!(
                "parameters became non-finite at step {}",
                self.step
            )));
        }
        self.step += 1;
        Ok(direction)
    }
}

/// How [`run_training`] obtains the gradient of each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientSource {
    FullBatch,
    /// Mean of `batch` sampled per-sample gradients, reseeded every step.
    MiniBatch { batch: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingOptions {
    pub source: GradientSource,
    /// Adds `weight_decay * theta` to every gradient.
    pub weight_decay: f64,
    /// Record wall-clock step times; otherwise `step_time_ns` stays 0 and
    /// traces are reproducible bit for bit.
    pub timing: bool,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            source: GradientSource::FullBatch,
            weight_decay: 0.0,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Loss before the step.
    pub loss: f64,
    pub grad_norm: f64,
    pub step_time_ns: u64,
    /// Cosine between the applied direction and the gradient.
    pub direction_cosine: Option<f64>,
    pub warmup: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub final_loss: f64,
}

impl Trace {
    pub fn warmup_only(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.warmup)
    }

    /// `step,loss,grad_norm,step_time_ns`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "grad_norm", "step_time_ns"])?;
        for r in &self.records {
            w.write_record(&[
                r.step.to_string(),
                r.loss.to_string(),
                r.grad_norm.to_string(),
                r.step_time_ns.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn step_gradient(
    provider: &impl GradientProvider,
    theta: &[f64],
    opts: &TrainingOptions,
    step: usize,
) -> Result<Vec<f64>> {
    let mut g = match opts.source {
        GradientSource::FullBatch => provider.gradient(theta)?,
        GradientSource::MiniBatch { batch, seed } => {
            let samples = provider.sample_gradients(theta, batch, seed.wrapping_add(step as u64))?;
            batch_average_gradients(&samples, batch)?.into_flat()
        }
    };
    if opts.weight_decay != 0.0 {
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += opts.weight_decay * t;
        }
    }
    Ok(g)
}

pub fn run_training(
    provider: &impl GradientProvider,
    state: &mut OptimizerState,
    steps: usize,
    opts: &TrainingOptions,
) -> Result<Trace> {
    check_len(provider.dim(), state.theta.len())?;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step = state.step;
        let loss = provider.loss(state.theta.as_slice())?;
        let g = step_gradient(provider, state.theta.as_slice(), opts, step)?;
        let warmup = state.in_warmup();
        let start = opts.timing.then(Instant::now);
        let direction = state.step_with(&g)?;
        let step_time_ns = start.map_or(0, |s| s.elapsed().as_nanos() as u64);
        records.push(TraceRecord {
            step,
            loss,
            grad_norm: norm(&g),
            step_time_ns,
            direction_cosine: cosine(&direction, &g),
            warmup,
        });
    }
    Ok(Trace {
        records,
        final_loss: provider.loss(state.theta.as_slice())?,
    })
}

/// Plain full-batch gradient descent; the reference the stepper is judged against.
pub fn gradient_descent(provider: &impl GradientProvider, theta: &[f64], lr: f64, steps: usize) -> Result<(Vec<f64>, f64)> {
    check_len(provider.dim(), theta.len())?;
    let mut theta = theta.to_vec();
    for _ in 0..steps {
        let g = provider.gradient(&theta)?;
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= lr * gi;
        }
    }
    let loss = provider.loss(&theta)?;
    Ok((theta, loss))
}

/// Cosines of the descent direction for `grad`: dynamic window against a
/// static sketch of `first`, and the static sketches of `first` and `second`
/// against each other.
pub fn cosine_similarity_probe(
    sketch: &DynamicSketch,
    first: &GradientMatrix,
    second: &GradientMatrix,
    grad: &[f64],
) -> Result<(f64, f64)> {
    let cfg = sketch.config();
    let dynamic = sketch.ihvp(grad)?;
    let s1 = StaticSketch::from_gradients(first, cfg)?.ihvp(grad)?;
    let s2 = StaticSketch::from_gradients(second, cfg)?.ihvp(grad)?;
    let zero = || MfacError::Numerical("zero-norm descent direction".into());
    Ok((cosine(&dynamic, &s1).ok_or_else(zero)?, cosine(&s1, &s2).ok_or_else(zero)?))
}

/// One line of the JSON-lines probe log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub cos_dyn_static: f64,
    pub cos_static_static: f64,
}

pub fn write_probes<W: Write>(mut out: W, probes: &[ProbeRecord]) -> Result<()> {
    for p in probes {
        serde_json::to_writer(&mut out, p).map_err(|e| MfacError::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

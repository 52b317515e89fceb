//! Command-line front end behind the `mfac` binary.
//!
//! Exit codes: 0 on success, 1 when inputs are invalid or a check fails,
//! 2 on I/O errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{run_bench, Axis, BenchConfig, BenchOp};
use crate::config::{BlockSize, Dtype, FisherConfig, DEFAULT_PRUNING_LAMBDA};
use crate::error::{MfacError, Result};
use crate::gradients::{GradientMatrix, ParamVector};
use crate::io::{load_gradients, save_mfacbin, GradientFormat};
use crate::optimizer::{
    cosine_similarity_probe, gradient_descent, run_training, write_probes, LrSchedule, OptimizerState, ProbeRecord,
    TrainingOptions, WarmupMode,
};
use crate::provider::{GradientProvider, LogisticProvider, QuadraticProvider};
use crate::pruning::{prune_step, write_report, PruneMode};
use crate::synth::{gaussian_gradients, low_rank_gradients, normal_vec, rng};
use crate::verify::{verify_gradients, verify_sketch_file, VerifyReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mfac", version, about = "Matrix-free inverse-Fisher products, pruning and preconditioned descent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the sketches against the dense oracles.
    Verify(VerifyArgs),
    /// Prune a weight vector with OBD/OBS.
    Prune(PruneArgs),
    /// Train the bundled logistic-regression toy.
    Optimize(OptimizeArgs),
    /// Time the sketch operations over a size grid.
    Bench(BenchArgs),
    /// Write a synthetic gradient file.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
pub struct FisherArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value = "full")]
    pub blocksize: BlockSize,
    #[arg(long, default_value = "f64")]
    pub dtype: Dtype,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl FisherArgs {
    fn config(&self, m: usize, d: usize, default_lambda: f64) -> Result<FisherConfig> {
        FisherConfig::new(m, self.lambda.unwrap_or(default_lambda), d)?
            .with_block_size(self.blocksize)
            .map(|c| c.with_dtype(self.dtype))
    }

    /// Gradients from `path`, or a seeded Gaussian `m x d` instance.
    fn gradients(&self, path: Option<&Path>) -> Result<GradientMatrix> {
        match path {
            Some(p) => load_gradients(p, GradientFormat::from_path(p), self.dtype),
            None => Ok(gaussian_gradients(self.m, self.d, self.seed)?.quantized(self.dtype)),
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub fisher: FisherArgs,
    /// Gradient file (`.csv` or mfacbin); generated from --seed when absent.
    #[arg(long)]
    pub gradients: Option<PathBuf>,
    /// Check a saved static sketch instead.
    #[arg(long, conflicts_with = "gradients")]
    pub sketch: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Obd,
    Obs,
    ObsSolve,
}

impl From<ModeArg> for PruneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Obd => PruneMode::ObdNoUpdate,
            ModeArg::Obs => PruneMode::ObsSimultaneous,
            ModeArg::ObsSolve => PruneMode::ObsLinearSolve,
        }
    }
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub fisher: FisherArgs,
    /// Weight vector as a one-row gradient file; generated when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub gradients: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Obs)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1)]
    pub recompute: usize,
    /// Decision report CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the pruned weights (mfacbin).
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WarmupArg {
    Passthrough,
    Partial,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long, default_value_t = 50)]
    pub d: usize,
    /// Window length.
    #[arg(long, default_value_t = 32)]
    pub m: usize,
    /// Training samples of the toy problem.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = WarmupArg::Passthrough)]
    pub warmup: WarmupArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Steps of the plain gradient-descent reference run.
    #[arg(long, default_value_t = 20000)]
    pub oracle_steps: usize,
    /// Trace CSV; stdout summary only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines cosine probes, one every `probe_every` steps.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub probe_every: usize,
    /// Save the final gradient window here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![4096, 8192, 16384, 32768, 65536])]
    pub d: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![64])]
    pub m: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ops: Vec<BenchOp>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmups: usize,
    #[arg(long, default_value_t = DEFAULT_PRUNING_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    Gaussian,
    LowRank,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f64")]
    pub dtype: Dtype,
    #[arg(long, value_enum, default_value_t = GenKind::Gaussian)]
    pub kind: GenKind,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    /// Gradient file; a `.json` sidecar records how it was generated.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a standard normal weight vector.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Serialize)]
struct GenRecord {
    kind: GenKind,
    m: usize,
    d: usize,
    seed: u64,
    dtype: &'static str,
    rank: Option<usize>,
}

fn output<'a>(path: Option<&Path>, stdout: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(stdout),
    })
}

fn print_failures(report: &VerifyReport, stderr: &mut dyn Write) -> Result<i32> {
    if report.passed() {
        return Ok(EXIT_OK);
    }
    for c in report.failures() {
        writeln!(stderr, "check failed: {} (error {:e} > {:e})", c.name, c.error, c.tolerance)?;
    }
    Ok(EXIT_INVALID)
}

fn cmd_verify(a: &VerifyArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let report = match &a.sketch {
        Some(path) => verify_sketch_file(path)?,
        None => {
            let g = a.fisher.gradients(a.gradients.as_deref())?;
            let cfg = a.fisher.config(g.rows(), g.cols(), DEFAULT_PRUNING_LAMBDA)?;
            verify_gradients(&g, &cfg, a.fisher.seed)?
        }
    };
    report.write_csv(output(a.out.as_deref(), stdout)?)?;
    print_failures(&report, stderr)
}

fn load_weights(path: &Path, dtype: Dtype) -> Result<ParamVector> {
    let w = load_gradients(path, GradientFormat::from_path(path), dtype)?;
    if w.rows() != 1 {
        return Err(MfacError::Format(format!("weights file must hold one row, found {}", w.rows())));
    }
    ParamVector::new(w.into_flat())
}

fn cmd_prune(a: &PruneArgs, stdout: &mut dyn Write) -> Result<i32> {
    if !(0.0..1.0).contains(&a.sparsity) {
        return Err(MfacError::Config(format!("sparsity must be in [0, 1), got {}", a.sparsity)));
    }
    let g = a.fisher.gradients(a.gradients.as_deref())?;
    let theta = match &a.weights {
        Some(p) => load_weights(p, a.fisher.dtype)?,
        None => ParamVector::new(normal_vec(&mut rng(a.fisher.seed.wrapping_add(1)), g.cols(), 1.0))?,
    };
    let cfg = a.fisher.config(g.rows(), theta.len(), DEFAULT_PRUNING_LAMBDA)?;
    let count = (a.sparsity * theta.len() as f64).floor() as usize;
    // The weights are taken as the minimizer of the quadratic model the
    // gradients define, so recomputation sees the same curvature throughout.
    let provider = QuadraticProvider::new(g, cfg.lambda, theta.as_slice().to_vec())?;
    let (pruned, decision) = prune_step(&theta, &provider, &cfg, count, a.mode.into(), a.recompute, &[], a.fisher.seed)?;
    write_report(output(a.out.as_deref(), stdout)?, theta.as_slice(), &decision)?;
    if let Some(p) = &a.weights_out {
        let row = GradientMatrix::from_flat(1, pruned.len(), pruned.into_inner())?;
        save_mfacbin(p, &row, a.fisher.dtype)?;
    }
    Ok(EXIT_OK)
}

fn cmd_optimize(a: &OptimizeArgs, stdout: &mut dyn Write) -> Result<i32> {
    let provider = LogisticProvider::synthetic(a.n, a.d, 4.0, 1e-3, a.seed)?;
    let cfg = FisherConfig::new(a.m, a.lambda, a.d)?;
    let warmup = match a.warmup {
        WarmupArg::Passthrough => WarmupMode::Passthrough,
        WarmupArg::Partial => WarmupMode::PartialWindow,
    };
    let mut state = OptimizerState::new(ParamVector::zeros(a.d), &cfg, LrSchedule::Constant(a.lr))?.with_warmup(warmup);
    let opts = TrainingOptions::default();

    let mut probes = Vec::new();
    let mut records = Vec::new();
    let mut final_loss = provider.loss(state.theta().as_slice())?;
    let chunk = if a.probes.is_some() { a.probe_every.max(1) } else { a.steps.max(1) };
    let mut done = 0;
    while done < a.steps {
        let n = chunk.min(a.steps - done);
        let trace = run_training(&provider, &mut state, n, &opts)?;
        records.extend(trace.records);
        final_loss = trace.final_loss;
        done += n;
        if a.probes.is_some() && state.sketch().is_full() {
            let theta = state.theta().as_slice();
            let seed = a.seed.wrapping_add(done as u64);
            let first = provider.sample_gradients(theta, a.m, seed)?;
            let second = provider.sample_gradients(theta, a.m, seed ^ 0x5eed)?;
            let (cos_dyn_static, cos_static_static) =
                cosine_similarity_probe(state.sketch(), &first, &second, &provider.gradient(theta)?)?;
            probes.push(ProbeRecord {
                step: done,
                cos_dyn_static,
                cos_static_static,
            });
        }
    }
    let trace = crate::optimizer::Trace { records, final_loss };
    if let Some(p) = &a.out {
        trace.write_csv(BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.probes {
        write_probes(BufWriter::new(File::create(p)?), &probes)?;
    }
    if let Some(p) = &a.checkpoint {
        state.sketch().save(p)?;
    }
    let (_, oracle) = gradient_descent(&provider, &vec![0.0; a.d], 1.0, a.oracle_steps)?;
    writeln!(stdout, "steps,{}", a.steps)?;
    writeln!(stdout, "final_loss,{final_loss}")?;
    writeln!(stdout, "oracle_loss,{oracle}")?;
    writeln!(stdout, "gap,{}", final_loss - oracle)?;
    writeln!(stdout, "warmup_only,{}", trace.warmup_only())?;
    Ok(EXIT_OK)
}

fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = BenchConfig {
        dims: a.d.clone(),
        windows: a.m.clone(),
        ops: if a.ops.is_empty() { BenchOp::ALL.to_vec() } else { a.ops.clone() },
        repetitions: a.reps,
        warmups: a.warmups,
        lambda: a.lambda,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg)?;
    report.write_csv(output(a.out.as_deref(), stdout)?)?;
    if a.out.is_some() {
        for s in &report.slopes {
            let axis = match s.axis {
                Axis::D => "d",
                Axis::M => "m",
            };
            writeln!(stdout, "{} slope in {axis} ({} points): {:.3}", s.op.name(), s.points, s.slope)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_gen(a: &GenArgs) -> Result<i32> {
    let g = match a.kind {
        GenKind::Gaussian => gaussian_gradients(a.m, a.d, a.seed)?,
        GenKind::LowRank => low_rank_gradients(a.m, a.d, a.rank, 0.1, a.seed)?,
    };
    save_mfacbin(&a.out, &g, a.dtype)?;
    let record = GenRecord {
        kind: a.kind,
        m: a.m,
        d: a.d,
        seed: a.seed,
        dtype: if a.dtype == Dtype::F32 { "f32" } else { "f64" },
        rank: matches!(a.kind, GenKind::LowRank).then_some(a.rank),
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| MfacError::Format(e.to_string()))?;
    std::fs::write(a.out.with_extension("json"), json + "\n")?;
    if let Some(p) = &a.weights {
        let w = normal_vec(&mut rng(a.seed.wrapping_add(1)), a.d, 1.0);
        save_mfacbin(p, &GradientMatrix::from_flat(1, a.d, w)?, a.dtype)?;
    }
    Ok(EXIT_OK)
}

fn exit_code(e: &MfacError) -> i32 {
    match e {
        MfacError::Io(_) => EXIT_IO,
        MfacError::Csv(c) if c.is_io_error() => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

/// Caps the global thread pool at `MFAC_THREADS` when set.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MFAC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| MfacError::Config(format!("MFAC_THREADS must be a positive integer, got `{v}`")))?;
        // A second call in the same process finds the pool already built.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    configure_threads()?;
    match &cli.command {
        Command::Verify(a) => cmd_verify(a, stdout, stderr),
        Command::Prune(a) => cmd_prune(a, stdout),
        Command::Optimize(a) => cmd_optimize(a, stdout),
        Command::Bench(a) => cmd_bench(a, stdout),
        Command::Gen(a) => cmd_gen(a),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

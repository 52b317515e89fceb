//! OBD/OBS pruning on top of inverse-Fisher queries.
//!
//! Weights are ranked by the saliency `theta_i^2 / (2 [F^{-1}]_ii)`. Three
//! ways of treating the surviving weights are offered:
//!
//! * [`PruneMode::ObdNoUpdate`]: zero the selected weights, leave the rest.
//! * [`PruneMode::ObsSimultaneous`]: add up the single-weight OBS corrections
//!   and apply them with one inverse-Fisher product.
//! * [`PruneMode::ObsLinearSolve`]: the exact joint correction, solving
//!   `[F^{-1}]_QQ c = theta_Q`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::config::{BlockSize, FisherConfig};
use crate::curvature::{check_index, check_len, InverseCurvature};
use crate::error::{MfacError, Result};
use crate::gradients::ParamVector;
use crate::provider::GradientProvider;
use crate::static_sketch::{BlockStaticSketch, StaticSketch};

/// Largest pruned set the exact joint update will solve for.
pub const LINEAR_SOLVE_MAX: usize = 4096;

/// Allowed relative asymmetry of the assembled `[F^{-1}]_QQ`.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    ObdNoUpdate,
    ObsSimultaneous,
    ObsLinearSolve,
}

impl PruneMode {
    pub fn name(self) -> &'static str {
        match self {
            PruneMode::ObdNoUpdate => "obd",
            PruneMode::ObsSimultaneous => "obs",
            PruneMode::ObsLinearSolve => "obs-solve",
        }
    }
}

impl std::str::FromStr for PruneMode {
    type Err = MfacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obd" => Ok(PruneMode::ObdNoUpdate),
            "obs" => Ok(PruneMode::ObsSimultaneous),
            "obs-solve" => Ok(PruneMode::ObsLinearSolve),
            other => Err(MfacError::Config(format!("unknown prune mode `{other}`"))),
        }
    }
}

/// Outcome of one pruning step.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneDecision {
    /// Sorted indices of the weights pruned by this step.
    pub pruned: Vec<usize>,
    pub saliencies: Vec<f64>,
    /// `theta_after - theta_before`.
    pub delta: Vec<f64>,
    pub mode: PruneMode,
}

/// `theta_i^2 / (2 diag_inv_i)`
pub fn saliency(theta: &[f64], diag_inv: &[f64]) -> Result<Vec<f64>> {
    check_len(theta.len(), diag_inv.len())?;
    theta
        .iter()
        .zip(diag_inv)
        .enumerate()
        .map(|(i, (&t, &h))| {
            if !(h > 0.0) {
                return Err(MfacError::Numerical(format!(
                    "inverse diagonal entry {i} is {h}; expected a positive value"
                )));
            }
            Ok(t * t / (2.0 * h))
        })
        .collect()
}

/// The `count` non-frozen indices of smallest saliency, ties going to the lower index.
pub fn select_by_saliency(saliencies: &[f64], count: usize, frozen: &[usize]) -> Result<Vec<usize>> {
    let d = saliencies.len();
    let mut is_frozen = vec![false; d];
    for &i in frozen {
        check_index(i, d)?;
        is_frozen[i] = true;
    }
    let mut candidates: Vec<usize> = (0..d).filter(|&i| !is_frozen[i]).collect();
    if count > candidates.len() {
        return Err(MfacError::Config(format!(
            "cannot prune {count} weights: only {} are not frozen",
            candidates.len()
        )));
    }
    candidates.sort_by(|&a, &b| saliencies[a].total_cmp(&saliencies[b]).then(a.cmp(&b)));
    let mut chosen = candidates[..count].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn select_prune(
    theta: &[f64],
    curvature: &impl InverseCurvature,
    count: usize,
    frozen: &[usize],
) -> Result<Vec<usize>> {
    check_len(curvature.dim(), theta.len())?;
    select_by_saliency(&saliency(theta, &curvature.diag())?, count, frozen)
}

fn zero_on(delta: &mut [f64], theta: &[f64], pruned: &[usize]) {
    for &i in pruned {
        delta[i] = -theta[i];
    }
}

/// Zero the pruned weights without touching any other.
pub fn obd_update(theta: &[f64], pruned: &[usize]) -> Result<Vec<f64>> {
    let mut delta = vec![0.0; theta.len()];
    for &i in pruned {
        check_index(i, theta.len())?;
    }
    zero_on(&mut delta, theta, pruned);
    Ok(delta)
}

/// `delta = -F^{-1} w` with `w_i = theta_i / [F^{-1}]_ii` on the pruned set.
pub fn obs_update_simultaneous(theta: &[f64], curvature: &impl InverseCurvature, pruned: &[usize]) -> Result<Vec<f64>> {
    let d = curvature.dim();
    check_len(d, theta.len())?;
    if pruned.is_empty() {
        return Err(MfacError::Config("pruned set is empty".into()));
    }
    let mut w = vec![0.0; d];
    for &i in pruned {
        check_index(i, d)?;
        let h = curvature.element(i, i)?;
        if !(h > 0.0) {
            return Err(MfacError::Numerical(format!("inverse diagonal entry {i} is {h}")));
        }
        w[i] = theta[i] / h;
    }
    let mut delta: Vec<f64> = curvature.ihvp(&w)?.into_iter().map(|x| 0.0 - x).collect();
    zero_on(&mut delta, theta, pruned);
    Ok(delta)
}

/// Exact minimizer of `0.5 delta^T F delta` with `delta_Q = -theta_Q`.
pub fn obs_update_linear_solve(theta: &[f64], curvature: &impl InverseCurvature, pruned: &[usize]) -> Result<Vec<f64>> {
    let d = curvature.dim();
    check_len(d, theta.len())?;
    if pruned.is_empty() {
        return Err(MfacError::Config("pruned set is empty".into()));
    }
    if pruned.len() > LINEAR_SOLVE_MAX {
        return Err(MfacError::Config(format!(
            "linear-solve update limited to {LINEAR_SOLVE_MAX} weights, got {}",
            pruned.len()
        )));
    }
    let k = pruned.len();
    let mut sub = DMatrix::<f64>::zeros(k, k);
    for (a, &i) in pruned.iter().enumerate() {
        for (b, &j) in pruned.iter().enumerate().skip(a) {
            sub[(a, b)] = curvature.element(i, j)?;
            if b != a {
                sub[(b, a)] = curvature.element(j, i)?;
            }
        }
    }
    let scale = sub.abs().max();
    let asym = (&sub - sub.transpose()).abs().max();
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(MfacError::Numerical(format!(
            "[F^-1]_QQ asymmetric by {asym:e} (scale {scale:e})"
        )));
    }
    let rhs = DVector::from_iterator(k, pruned.iter().map(|&i| theta[i]));
    let c = sub
        .cholesky()
        .ok_or_else(|| MfacError::Numerical("[F^-1]_QQ is not positive definite".into()))?
        .solve(&rhs);
    let mut w = vec![0.0; d];
    for (a, &i) in pruned.iter().enumerate() {
        w[i] = c[a];
    }
    let mut delta: Vec<f64> = curvature.ihvp(&w)?.into_iter().map(|x| 0.0 - x).collect();
    zero_on(&mut delta, theta, pruned);
    Ok(delta)
}

pub fn update_for_mode(
    mode: PruneMode,
    theta: &[f64],
    curvature: &impl InverseCurvature,
    pruned: &[usize],
) -> Result<Vec<f64>> {
    match mode {
        PruneMode::ObdNoUpdate => obd_update(theta, pruned),
        PruneMode::ObsSimultaneous => obs_update_simultaneous(theta, curvature, pruned),
        PruneMode::ObsLinearSolve => obs_update_linear_solve(theta, curvature, pruned),
    }
}

/// Selects and applies one batch of pruning against a fixed curvature estimate.
pub fn prune_once(
    theta: &[f64],
    curvature: &impl InverseCurvature,
    count: usize,
    frozen: &[usize],
    mode: PruneMode,
) -> Result<PruneDecision> {
    let saliencies = saliency(theta, &curvature.diag())?;
    let pruned = select_by_saliency(&saliencies, count, frozen)?;
    let delta = if pruned.is_empty() {
        vec![0.0; theta.len()]
    } else {
        update_for_mode(mode, theta, curvature, &pruned)?
    };
    Ok(PruneDecision {
        pruned,
        saliencies,
        delta,
        mode,
    })
}

enum Curvature {
    Full(StaticSketch),
    Blocked(BlockStaticSketch),
}

fn build_curvature(g: crate::gradients::GradientMatrix, cfg: &FisherConfig) -> Result<Curvature> {
    match cfg.block_size {
        BlockSize::Width(w) if w < cfg.dim => Ok(Curvature::Blocked(BlockStaticSketch::build(&g, cfg)?)),
        _ => Ok(Curvature::Full(StaticSketch::build(g, cfg)?)),
    }
}

/// Prunes `target_count` more weights in `recompute` equal sub-steps,
/// rebuilding the curvature estimate from fresh gradients before each.
///
/// Gradients are masked on already-pruned coordinates, so every sub-step
/// works with the Fisher of the surviving weights and never moves a pruned
/// weight. Saliencies in the returned decision are those of the first
/// sub-step.
#[allow(clippy::too_many_arguments)]
pub fn prune_step(
    theta: &ParamVector,
    provider: &impl GradientProvider,
    cfg: &FisherConfig,
    target_count: usize,
    mode: PruneMode,
    recompute: usize,
    frozen: &[usize],
    seed: u64,
) -> Result<(ParamVector, PruneDecision)> {
    cfg.validate()?;
    check_len(cfg.dim, theta.len())?;
    check_len(cfg.dim, provider.dim())?;
    if recompute == 0 {
        return Err(MfacError::Config("recompute must be at least 1".into()));
    }
    let mut current = theta.as_slice().to_vec();
    let mut pinned: Vec<usize> = frozen.to_vec();
    let mut pruned = Vec::new();
    let mut first_saliencies = None;

    let base = target_count / recompute;
    let extra = target_count % recompute;
    for s in 0..recompute {
        let count = base + usize::from(s < extra);
        if count == 0 && first_saliencies.is_some() {
            continue;
        }
        let g = provider
            .sample_gradients(&current, cfg.m, seed.wrapping_add(s as u64))?
            .masked(&pinned);
        let decision = match build_curvature(g, cfg)? {
            Curvature::Full(c) => prune_once(&current, &c, count, &pinned, mode)?,
            Curvature::Blocked(c) => prune_once(&current, &c, count, &pinned, mode)?,
        };
        for (t, dlt) in current.iter_mut().zip(&decision.delta) {
            *t += dlt;
        }
        pinned.extend_from_slice(&decision.pruned);
        for &i in &pinned {
            current[i] = 0.0;
        }
        pruned.extend_from_slice(&decision.pruned);
        first_saliencies.get_or_insert(decision.saliencies);
    }
    pruned.sort_unstable();
    let delta = current.iter().zip(theta.as_slice()).map(|(a, b)| a - b).collect();
    let decision = PruneDecision {
        pruned,
        saliencies: first_saliencies.unwrap_or_default(),
        delta,
        mode,
    };
    Ok((ParamVector::new(current)?, decision))
}

/// Polynomial sparsity ramp from `initial` to `target` over `steps` pruning events.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsitySchedule {
    pub initial: f64,
    pub target: f64,
    pub steps: usize,
    pub exponent: f64,
}

impl SparsitySchedule {
    pub fn new(initial: f64, target: f64, steps: usize, exponent: f64) -> Result<Self> {
        let ok = (0.0..1.0).contains(&initial) && (0.0..1.0).contains(&target) && initial <= target;
        if !ok || steps == 0 || !(exponent >= 1.0) {
            return Err(MfacError::Config(format!(
                "invalid schedule: initial {initial}, target {target}, steps {steps}, exponent {exponent}"
            )));
        }
        Ok(Self {
            initial,
            target,
            steps,
            exponent,
        })
    }

    /// Sparsity after pruning event `step` (1-based); `0` gives `initial`.
    pub fn sparsity_at(&self, step: usize) -> f64 {
        if step == 0 {
            return self.initial;
        }
        if step >= self.steps {
            return self.target;
        }
        let t = step as f64 / self.steps as f64;
        self.target + (self.initial - self.target) * (1.0 - t).powf(self.exponent)
    }

    /// Cumulative number of pruned weights after each event.
    pub fn counts(&self, dim: usize) -> Vec<usize> {
        (1..=self.steps)
            .map(|s| (self.sparsity_at(s) * dim as f64).floor() as usize)
            .collect()
    }
}

/// Runs a full schedule of [`prune_step`] calls, carrying the pruned set forward.
pub fn gradual_prune(
    theta: &ParamVector,
    provider: &impl GradientProvider,
    cfg: &FisherConfig,
    schedule: &SparsitySchedule,
    mode: PruneMode,
    recompute: usize,
    seed: u64,
) -> Result<(ParamVector, Vec<PruneDecision>)> {
    let mut current = theta.clone();
    let mut frozen: Vec<usize> = Vec::new();
    let mut decisions = Vec::new();
    for (s, total) in schedule.counts(cfg.dim).into_iter().enumerate() {
        let count = total.saturating_sub(frozen.len());
        let (next, decision) = prune_step(
            &current,
            provider,
            cfg,
            count,
            mode,
            recompute,
            &frozen,
            seed.wrapping_add(1000 * s as u64),
        )?;
        frozen.extend_from_slice(&decision.pruned);
        frozen.sort_unstable();
        current = next;
        decisions.push(decision);
    }
    Ok((current, decisions))
}

/// CSV report: `index,theta_before,saliency,in_q,delta,theta_after`.
pub fn write_report<W: Write>(out: W, theta_before: &[f64], decision: &PruneDecision) -> Result<()> {
    let mut in_q = vec![false; theta_before.len()];
    for &i in &decision.pruned {
        in_q[i] = true;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "theta_before", "saliency", "in_q", "delta", "theta_after"])?;
    for i in 0..theta_before.len() {
        let sal = decision.saliencies.get(i).copied().unwrap_or(f64::NAN);
        w.write_record(&[
            i.to_string(),
            theta_before[i].to_string(),
            sal.to_string(),
            u8::from(in_q[i]).to_string(),
            decision.delta[i].to_string(),
            (theta_before[i] + decision.delta[i]).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

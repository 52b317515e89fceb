//! Cross-checks of the matrix-free algorithms against the dense oracles.

use std::io::Write;
use std::path::Path;

use crate::config::FisherConfig;
use crate::curvature::InverseCurvature;
use crate::dynamic_sketch::DynamicSketch;
use crate::error::{MfacError, Result};
use crate::gradients::GradientMatrix;
use crate::io::Container;
use crate::linalg::{dot, max_abs_diff, relative_l2};
use crate::oracle::{dense_inverse_direct, dense_inverse_woodbury, fisher_product, ORACLE_MAX_DIM};
use crate::static_sketch::{
    paged_static_setup, PagedGradientStore, PagingConfig, StaticSketch, Q_TOLERANCE, STATIC_KIND,
};
use crate::synth::{normal_vec, rng};

/// Tolerance of every product/element comparison in the suite.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: &str, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            error,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    /// `check,error,tolerance,status`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["check", "error", "tolerance", "status"])?;
        for c in &self.checks {
            let status = if c.passed() { "pass" } else { "FAIL" };
            w.write_record(&[c.name.clone(), format!("{:e}", c.error), format!("{:e}", c.tolerance), status.into()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest entrywise difference relative to the largest reference entry.
fn rel_max(a: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    max_abs_diff(a, reference) / scale.max(f64::MIN_POSITIVE)
}

fn worst(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

/// Runs the full equivalence suite on `g`: both dense oracles, static and
/// dynamic products, element and diagonal queries, the coefficient identity,
/// the fused update path, paged setup and the inverse property.
pub fn verify_gradients(g: &GradientMatrix, cfg: &FisherConfig, seed: u64) -> Result<VerifyReport> {
    cfg.validate()?;
    if cfg.dim > ORACLE_MAX_DIM {
        return Err(MfacError::Config(format!(
            "d = {} exceeds the dense oracle limit of {ORACLE_MAX_DIM}; rerun with --d {ORACLE_MAX_DIM} or less",
            cfg.dim
        )));
    }
    let (m, d) = (cfg.m, cfg.dim);
    let mut r = rng(seed);
    let probes: Vec<Vec<f64>> = (0..3).map(|_| normal_vec(&mut r, d, 1.0)).collect();

    let direct = dense_inverse_direct(g, cfg)?;
    let woodbury = dense_inverse_woodbury(g, cfg)?;
    let stat = StaticSketch::from_gradients(g, cfg)?;
    let dynamic = DynamicSketch::setup(g, cfg)?;
    let mut checks = Vec::new();

    checks.push(Check::new(
        "oracle_direct_vs_woodbury",
        rel_max(&woodbury.to_row_major(), &direct.to_row_major()),
        1e-10,
    ));
    checks.push(Check::new("oracle_symmetry", woodbury.max_asymmetry(), 1e-10));

    let mut static_err = Vec::new();
    let mut dynamic_err = Vec::new();
    let mut cross_err = Vec::new();
    let mut inverse_static = Vec::new();
    let mut inverse_dynamic = Vec::new();
    let mut theorem = Vec::new();
    for x in &probes {
        let oracle = woodbury.ihvp(x)?;
        let s = stat.ihvp(x)?;
        let (dy, work) = dynamic.ihvp_with_work(x)?;
        static_err.push(relative_l2(&s, &oracle));
        dynamic_err.push(relative_l2(&dy, &oracle));
        cross_err.push(relative_l2(&dy, &s));
        let fx = fisher_product(g, cfg.lambda, x);
        inverse_static.push(relative_l2(&stat.ihvp(&fx)?, x));
        inverse_dynamic.push(relative_l2(&dynamic.ihvp(&fx)?, x));
        let numerators: Vec<f64> = (0..m).map(|k| dot(stat.v_row(k), x)).collect();
        let c = dynamic.coefficients_from_numerators(&numerators)?;
        theorem.push(rel_max(&c, &work.c));
    }
    checks.push(Check::new("static_ihvp_vs_oracle", worst(static_err), EQUIVALENCE_TOLERANCE));
    checks.push(Check::new("dynamic_ihvp_vs_oracle", worst(dynamic_err), EQUIVALENCE_TOLERANCE));
    checks.push(Check::new("static_vs_dynamic", worst(cross_err), EQUIVALENCE_TOLERANCE));
    checks.push(Check::new("theorem1_coefficients", worst(theorem), EQUIVALENCE_TOLERANCE));

    let dense = woodbury.to_row_major();
    let mut elems = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            elems.push(stat.element(i, j)?);
        }
    }
    checks.push(Check::new("static_element_vs_oracle", rel_max(&elems, &dense), EQUIVALENCE_TOLERANCE));
    let oracle_diag: Vec<f64> = (0..d).map(|i| dense[i * d + i]).collect();
    checks.push(Check::new("static_diag_vs_oracle", rel_max(&stat.diag(), &oracle_diag), EQUIVALENCE_TOLERANCE));

    let fresh = normal_vec(&mut r, d, 1.0 / (d as f64).sqrt());
    let mut fused = dynamic.clone();
    let mut split = dynamic.clone();
    let a = fused.update_and_ihvp(&fresh)?;
    split.replace_gradient(0, &fresh)?;
    let b = split.ihvp(&fresh)?;
    checks.push(Check::new("update_and_ihvp_vs_replace", rel_max(&a, &b), 1e-12));

    let store = PagedGradientStore::split(g.clone(), 2.min(m))?;
    let (paged, _) = paged_static_setup(store, cfg, PagingConfig::tight(2.min(m), m))?;
    let paged_err = rel_max(paged.v(), stat.v()).max(rel_max(paged.q(), stat.q()));
    checks.push(Check::new("paged_vs_in_memory", paged_err, 1e-12));

    checks.push(Check::new("inverse_property_static", worst(inverse_static), 1e-8));
    checks.push(Check::new("inverse_property_dynamic", worst(inverse_dynamic), 1e-8));
    Ok(VerifyReport { checks })
}

/// Structural checks of a saved static sketch. The `q-positivity` check
/// fails when a denominator has dropped below `m`.
pub fn verify_sketch_file(path: &Path) -> Result<VerifyReport> {
    let bytes = std::fs::read(path)?;
    let c = Container::decode(&bytes, STATIC_KIND)?;
    let q = c.matrix("q", 1, c.m)?;
    let v = c.matrix("V", c.m, c.d)?;
    let m = c.m as f64;
    let bound = m * (1.0 - Q_TOLERANCE);
    let q_violation = q
        .iter()
        .map(|&x| if x.is_finite() { (bound - x).max(0.0) } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let non_finite = v.iter().filter(|x| !x.is_finite()).count() as f64;
    let mut checks = vec![
        Check::new("q-positivity", q_violation, 0.0),
        Check::new("finite-entries", non_finite, 0.0),
    ];
    if q_violation == 0.0 && non_finite == 0.0 {
        let s = StaticSketch::from_container(&c)?;
        let diag = s.diag();
        let nonpositive = diag.iter().filter(|&&x| !(x > 0.0)).count() as f64;
        checks.push(Check::new("diag-positivity", nonpositive, 0.0));
        let step = (c.d / 16).max(1);
        let mut asym = 0.0f64;
        for i in (0..c.d).step_by(step) {
            for j in (0..c.d).step_by(step) {
                asym = asym.max((s.element(i, j)? - s.element(j, i)?).abs());
            }
        }
        let scale = diag.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        checks.push(Check::new("element-symmetry", asym / scale.max(f64::MIN_POSITIVE), 1e-12));
    }
    Ok(VerifyReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Dtype;
    use crate::synth::gaussian_gradients;

    #[test]
    fn generated_instance_passes() {
        let g = gaussian_gradients(16, 64, 0).unwrap();
        let cfg = FisherConfig::new(16, 1e-2, 64).unwrap();
        let report = verify_gradients(&g, &cfg, 0).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
        assert_eq!(report.checks.len(), 12);
    }

    #[test]
    fn oracle_guard_refuses_large_d() {
        let cfg = FisherConfig::new(1, 1.0, ORACLE_MAX_DIM + 1).unwrap();
        let g = GradientMatrix::zeros(1, ORACLE_MAX_DIM + 1).unwrap();
        let err = verify_gradients(&g, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("oracle limit"));
    }

    #[test]
    fn corrupted_denominator_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mfac");
        let g = gaussian_gradients(4, 8, 1).unwrap();
        let s = StaticSketch::from_gradients(&g, &FisherConfig::new(4, 0.1, 8).unwrap()).unwrap();
        s.save(&path, Dtype::F64).unwrap();
        assert!(verify_sketch_file(&path).unwrap().passed());

        let mut c = Container::decode(&std::fs::read(&path).unwrap(), STATIC_KIND).unwrap();
        let q = c.sections.iter_mut().find(|x| x.tag == *b"q\0\0\0").unwrap();
        q.data[2] = 1.0;
        std::fs::write(&path, c.encode()).unwrap();
        let report = verify_sketch_file(&path).unwrap();
        assert_eq!(report.failures().iter().map(|c| c.name.as_str()).collect::<Vec<_>>(), ["q-positivity"]);
    }
}

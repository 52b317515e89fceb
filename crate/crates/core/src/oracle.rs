//! Dense reference implementations for small problems.
//!
//! Everything here materializes `d x d` matrices and exists to check the
//! matrix-free sketches. Two independent constructions of the inverse are
//! provided: a Cholesky factorization of the explicit Fisher, and the
//! rank-one Sherman-Morrison recursion.

use nalgebra::{DMatrix, DVector};

use crate::config::FisherConfig;
use crate::curvature::{check_index, check_len, InverseCurvature};
use crate::error::{MfacError, Result};
use crate::gradients::GradientMatrix;

/// Largest dimension the oracle will materialize.
pub const ORACLE_MAX_DIM: usize = 4096;

/// Explicit inverse of a dampened empirical Fisher.
#[derive(Debug, Clone)]
pub struct DenseFisher {
    pub inverse: DMatrix<f64>,
    pub lambda: f64,
    pub m: usize,
}

fn guard(g: &GradientMatrix, cfg: &FisherConfig) -> Result<()> {
    cfg.validate()?;
    if g.cols() > ORACLE_MAX_DIM {
        return Err(MfacError::Config(format!(
            "dense oracle refuses d = {} (limit {ORACLE_MAX_DIM}); use a smaller instance",
            g.cols()
        )));
    }
    check_len(cfg.dim, g.cols())?;
    check_len(cfg.m, g.rows())
}

/// `lambda * I + (1/m) G^T G`, fully materialized.
pub fn dense_fisher(g: &GradientMatrix, cfg: &FisherConfig) -> Result<DMatrix<f64>> {
    guard(g, cfg)?;
    let d = g.cols();
    let gm = DMatrix::from_row_slice(g.rows(), d, g.as_slice());
    let mut f = gm.transpose() * &gm;
    f /= cfg.m as f64;
    for i in 0..d {
        f[(i, i)] += cfg.lambda;
    }
    Ok(f)
}

/// `F x = lambda x + (1/m) G^T (G x)` without forming `F`.
pub fn fisher_product(g: &GradientMatrix, lambda: f64, x: &[f64]) -> Vec<f64> {
    let m = g.rows() as f64;
    let gx: Vec<f64> = g.matvec(x).into_iter().map(|v| v / m).collect();
    let mut out = g.transpose_matvec(&gx);
    for (o, xi) in out.iter_mut().zip(x) {
        *o += lambda * xi;
    }
    out
}

/// Inverse by Cholesky factorization of the explicit Fisher.
pub fn dense_inverse_direct(g: &GradientMatrix, cfg: &FisherConfig) -> Result<DenseFisher> {
    let f = dense_fisher(g, cfg)?;
    let chol = f
        .cholesky()
        .ok_or_else(|| MfacError::Numerical("Cholesky factorization of the Fisher failed".into()))?;
    Ok(DenseFisher {
        inverse: chol.inverse(),
        lambda: cfg.lambda,
        m: cfg.m,
    })
}

/// Inverse by `m` Sherman-Morrison steps starting from `lambda^{-1} I`.
///
/// The rank-one corrections are accumulated apart from the `lambda^{-1} I`
/// base and added to it once at the end, so small corrections are not lost
/// against a large diagonal when `lambda` is tiny.
pub fn dense_inverse_woodbury(g: &GradientMatrix, cfg: &FisherConfig) -> Result<DenseFisher> {
    guard(g, cfg)?;
    let d = g.cols();
    let m = cfg.m as f64;
    let base = 1.0 / cfg.lambda;
    let mut correction = DMatrix::<f64>::zeros(d, d);
    for row in g.iter_rows() {
        let gv = DVector::from_column_slice(row);
        let u = &correction * &gv + &gv * base;
        let denom = m + gv.dot(&u);
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(MfacError::Numerical(format!("Sherman-Morrison denominator {denom}")));
        }
        correction.ger(-1.0 / denom, &u, &u, 1.0);
    }
    for i in 0..d {
        correction[(i, i)] += base;
    }
    Ok(DenseFisher {
        inverse: correction,
        lambda: cfg.lambda,
        m: cfg.m,
    })
}

/// Plain product of the stored inverse with `x`.
pub fn dense_ihvp(f: &DenseFisher, x: &[f64]) -> Result<Vec<f64>> {
    check_len(f.inverse.nrows(), x.len())?;
    Ok((&f.inverse * DVector::from_column_slice(x)).as_slice().to_vec())
}

impl DenseFisher {
    pub fn dim(&self) -> usize {
        self.inverse.nrows()
    }

    pub fn max_asymmetry(&self) -> f64 {
        (&self.inverse - self.inverse.transpose()).abs().max()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.inverse.clone().cholesky().is_some()
    }

    /// Row-major copy of the inverse.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.inverse.transpose().as_slice().to_vec()
    }
}

impl InverseCurvature for DenseFisher {
    fn dim(&self) -> usize {
        self.inverse.nrows()
    }

    fn ihvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        dense_ihvp(self, x)
    }

    fn element(&self, i: usize, j: usize) -> Result<f64> {
        check_index(i, self.dim())?;
        check_index(j, self.dim())?;
        Ok(self.inverse[(i, j)])
    }

    fn diag(&self) -> Vec<f64> {
        self.inverse.diagonal().as_slice().to_vec()
    }
}

/// Minimizer of `0.5 * delta^T F delta` subject to `delta_i = -theta_i` for `i` in `pruned`,
/// solved on the free coordinates with the explicit Fisher.
pub fn constrained_quadratic_update(fisher: &DMatrix<f64>, theta: &[f64], pruned: &[usize]) -> Result<Vec<f64>> {
    let d = fisher.nrows();
    check_len(d, theta.len())?;
    let mut is_pruned = vec![false; d];
    for &i in pruned {
        check_index(i, d)?;
        is_pruned[i] = true;
    }
    let free: Vec<usize> = (0..d).filter(|&i| !is_pruned[i]).collect();
    let mut delta = vec![0.0; d];
    for &i in pruned {
        delta[i] = -theta[i];
    }
    if free.is_empty() {
        return Ok(delta);
    }
    // F_RR delta_R = -F_RQ delta_Q
    let frr = DMatrix::from_fn(free.len(), free.len(), |a, b| fisher[(free[a], free[b])]);
    let rhs = DVector::from_fn(free.len(), |a, _| {
        -pruned.iter().map(|&q| fisher[(free[a], q)] * delta[q]).sum::<f64>()
    });
    let sol = frr
        .cholesky()
        .ok_or_else(|| MfacError::Numerical("free-block factorization failed".into()))?
        .solve(&rhs);
    for (a, &i) in free.iter().enumerate() {
        delta[i] = sol[a];
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_gradients;

    fn cfg(m: usize, lambda: f64, d: usize) -> FisherConfig {
        FisherConfig::new(m, lambda, d).unwrap()
    }

    fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = b.abs().max();
        (a - b).abs().max() / scale
    }

    #[test]
    fn zero_gradients_give_scaled_identity() {
        let g = GradientMatrix::zeros(3, 4).unwrap();
        let c = cfg(3, 2.0, 4);
        for f in [dense_inverse_direct(&g, &c).unwrap(), dense_inverse_woodbury(&g, &c).unwrap()] {
            assert!((&f.inverse - DMatrix::<f64>::identity(4, 4) * 0.5).abs().max() < 1e-15);
        }
    }

    #[test]
    fn single_axis_gradient() {
        // lambda I + g g^T = diag(2, 1)
        let g = GradientMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let c = cfg(1, 1.0, 2);
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        assert!((dense_inverse_direct(&g, &c).unwrap().inverse - &expected).abs().max() < 1e-15);
        assert!((dense_inverse_woodbury(&g, &c).unwrap().inverse - &expected).abs().max() < 1e-15);
    }

    #[test]
    fn dense_product_examples() {
        let half = DenseFisher {
            inverse: DMatrix::identity(2, 2) * 0.5,
            lambda: 2.0,
            m: 1,
        };
        assert_eq!(dense_ihvp(&half, &[2.0, 4.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(dense_ihvp(&half, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let diag = DenseFisher {
            inverse: DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]),
            lambda: 1.0,
            m: 1,
        };
        assert_eq!(dense_ihvp(&diag, &[1.0, 1.0]).unwrap(), vec![0.5, 1.0]);
        assert!(dense_ihvp(&diag, &[1.0]).is_err());
    }

    #[test]
    fn two_constructions_agree() {
        for (seed, lambda) in [(1u64, 1.0), (2, 1e-2), (3, 1e-5)] {
            let g = gaussian_gradients(4, 8, seed).unwrap();
            let c = cfg(4, lambda, 8);
            let direct = dense_inverse_direct(&g, &c).unwrap();
            let wood = dense_inverse_woodbury(&g, &c).unwrap();
            assert!(max_rel(&direct.inverse, &wood.inverse) < 1e-12, "lambda {lambda}");
        }
        for seed in 10..20u64 {
            let g = gaussian_gradients(12, 20, seed).unwrap();
            let c = cfg(12, 0.1, 20);
            let direct = dense_inverse_direct(&g, &c).unwrap();
            let wood = dense_inverse_woodbury(&g, &c).unwrap();
            assert!(max_rel(&direct.inverse, &wood.inverse) < 1e-10);
        }
    }

    #[test]
    fn inverse_is_symmetric_pd_and_inverts() {
        let g = gaussian_gradients(6, 10, 5).unwrap();
        let c = cfg(6, 0.05, 10);
        let f = dense_fisher(&g, &c).unwrap();
        let inv = dense_inverse_woodbury(&g, &c).unwrap();
        assert!(inv.max_asymmetry() < 1e-10);
        assert!(inv.is_positive_definite());
        let prod = &f * &inv.inverse;
        assert!((prod - DMatrix::<f64>::identity(10, 10)).abs().max() < 1e-8);
    }

    #[test]
    fn row_order_does_not_matter() {
        let g = gaussian_gradients(7, 9, 3).unwrap();
        let c = cfg(7, 0.01, 9);
        let order = [6, 2, 0, 5, 1, 4, 3];
        let a = dense_inverse_woodbury(&g, &c).unwrap();
        let b = dense_inverse_woodbury(&g.permuted_rows(&order).unwrap(), &c).unwrap();
        assert!(max_rel(&a.inverse, &b.inverse) < 1e-9);
    }

    #[test]
    fn guard_refuses_large_dims() {
        let g = GradientMatrix::zeros(1, ORACLE_MAX_DIM + 1).unwrap();
        let c = cfg(1, 1.0, ORACLE_MAX_DIM + 1);
        assert!(matches!(dense_inverse_direct(&g, &c), Err(MfacError::Config(_))));
    }

    #[test]
    fn matrix_free_product_matches_dense() {
        let g = gaussian_gradients(5, 7, 9).unwrap();
        let c = cfg(5, 0.3, 7);
        let f = dense_fisher(&g, &c).unwrap();
        let x: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let dense = (&f * DVector::from_column_slice(&x)).as_slice().to_vec();
        let free = fisher_product(&g, 0.3, &x);
        assert!(crate::linalg::max_abs_diff(&dense, &free) < 1e-13);
    }
}

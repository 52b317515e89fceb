//! Precomputed sketch over a fixed gradient set.
//!
//! Setup turns the gradients `g_1..g_m` into `v_i = F_{i-1}^{-1} g_i` and the
//! denominators `q_i = m + g_i . v_i`, where `F_i` is the dampened Fisher over
//! the first `i` gradients. Afterwards
//!
//! ```text
//! F^{-1} x = x / lambda - sum_k v_k (v_k . x) / q_k
//! ```
//!
//! costs `O(dm)` and a single entry of the inverse costs `O(m)`.

mod blockwise;
mod paged;

pub use blockwise::BlockStaticSketch;
pub use paged::{paged_static_setup, PagedGradientStore, PagingConfig, TransferStats};

use std::path::Path;

use crate::config::{Dtype, FisherConfig};
use crate::curvature::{check_index, check_len, InverseCurvature};
use crate::error::{MfacError, Result};
use crate::gradients::GradientMatrix;
use crate::io::{Container, Section};
use crate::linalg::{axpy, dot};

/// Relative slack allowed below `m` before a denominator counts as broken.
pub const Q_TOLERANCE: f64 = 1e-12;

/// Container payload kind for serialized static sketches.
pub const STATIC_KIND: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StaticSketch {
    /// Row-major `m x d`; row `k` is `v_k`.
    v: Vec<f64>,
    q: Vec<f64>,
    cfg: FisherConfig,
}

pub(crate) fn check_denominator(index: usize, q: f64, m: f64) -> Result<()> {
    let bound = m * (1.0 - Q_TOLERANCE);
    if !(q.is_finite() && q >= bound) {
        return Err(MfacError::Denominator { index, value: q, bound });
    }
    Ok(())
}

/// Writes `v = g / lambda - sum_l v_l (v_l . g) / q_l` into `out`.
///
/// `out` is first used as an accumulator for the correction terms; the
/// scaled gradient is added last. The paged setup uses the same order so both
/// produce identical bits.
pub(crate) fn accumulate_corrections<'a>(
    rows: impl Iterator<Item = (&'a [f64], f64)>,
    g: &[f64],
    acc: &mut [f64],
) {
    for (v_l, q_l) in rows {
        let c = dot(v_l, g) / q_l;
        axpy(-c, v_l, acc);
    }
}

pub(crate) fn finish_row(inv_lambda: f64, g: &[f64], acc: &mut [f64]) {
    for (a, gi) in acc.iter_mut().zip(g) {
        *a += inv_lambda * gi;
    }
}

impl StaticSketch {
    /// Builds the sketch, reusing the gradient buffer for `V`.
    pub fn build(gradients: GradientMatrix, cfg: &FisherConfig) -> Result<Self> {
        cfg.validate()?;
        check_len(cfg.dim, gradients.cols())?;
        check_len(cfg.m, gradients.rows())?;
        let d = cfg.dim;
        let m = cfg.m;
        let inv_lambda = 1.0 / cfg.lambda;
        let mut v = gradients.into_flat();
        let mut q = Vec::with_capacity(m);
        let mut g = vec![0.0; d];
        for i in 0..m {
            let (done, rest) = v.split_at_mut(i * d);
            let row = &mut rest[..d];
            g.copy_from_slice(row);
            row.fill(0.0);
            accumulate_corrections(done.chunks_exact(d).zip(q.iter().copied()), &g, row);
            finish_row(inv_lambda, &g, row);
            let qi = m as f64 + dot(row, &g);
            check_denominator(i, qi, m as f64)?;
            q.push(qi);
        }
        Ok(Self { v, q, cfg: cfg.clone() })
    }

    /// Builds the sketch from a borrowed gradient set.
    pub fn from_gradients(gradients: &GradientMatrix, cfg: &FisherConfig) -> Result<Self> {
        Self::build(gradients.clone(), cfg)
    }

    /// Reassembles a sketch from stored parts, validating every denominator.
    pub fn from_parts(v: Vec<f64>, q: Vec<f64>, cfg: &FisherConfig) -> Result<Self> {
        cfg.validate()?;
        check_len(cfg.m, q.len())?;
        check_len(cfg.m * cfg.dim, v.len())?;
        if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
            return Err(MfacError::NonFinite {
                row: pos / cfg.dim,
                col: pos % cfg.dim,
            });
        }
        for (i, &qi) in q.iter().enumerate() {
            check_denominator(i, qi, cfg.m as f64)?;
        }
        Ok(Self { v, q, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &FisherConfig {
        &self.cfg
    }

    pub fn m(&self) -> usize {
        self.cfg.m
    }

    pub fn v_row(&self, k: usize) -> &[f64] {
        &self.v[k * self.cfg.dim..(k + 1) * self.cfg.dim]
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.v.chunks_exact(self.cfg.dim).zip(self.q.iter().copied())
    }

    /// `x / lambda - V^T ((V x) / q)`.
    pub fn ihvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.cfg.dim, x.len())?;
        let inv_lambda = 1.0 / self.cfg.lambda;
        let mut out: Vec<f64> = x.iter().map(|xi| inv_lambda * xi).collect();
        for (v_k, q_k) in self.rows() {
            let c = dot(v_k, x) / q_k;
            axpy(-c, v_k, &mut out);
        }
        Ok(out)
    }

    /// Single entry `[F^{-1}]_{ij}` in `O(m)`.
    pub fn element(&self, i: usize, j: usize) -> Result<f64> {
        check_index(i, self.cfg.dim)?;
        check_index(j, self.cfg.dim)?;
        let d = self.cfg.dim;
        let mut s = 0.0;
        for (k, &q_k) in self.q.iter().enumerate() {
            s += (self.v[k * d + i] * self.v[k * d + j]) / q_k;
        }
        let base = if i == j { 1.0 / self.cfg.lambda } else { 0.0 };
        Ok(base - s)
    }

    /// `y_i = [F^{-1}]_{i, pi[i]}` for every row at once, in `O(dm)`.
    pub fn row_select(&self, pi: &[usize]) -> Result<Vec<f64>> {
        let d = self.cfg.dim;
        check_len(d, pi.len())?;
        for &p in pi {
            check_index(p, d)?;
        }
        let mut acc = vec![0.0; d];
        for (v_k, q_k) in self.rows() {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += (v_k[i] * v_k[pi[i]]) / q_k;
            }
        }
        let inv_lambda = 1.0 / self.cfg.lambda;
        Ok(acc
            .iter()
            .enumerate()
            .map(|(i, a)| if pi[i] == i { inv_lambda - a } else { 0.0 - a })
            .collect())
    }

    /// Diagonal of the inverse.
    pub fn diag(&self) -> Vec<f64> {
        let d = self.cfg.dim;
        let mut acc = vec![0.0; d];
        for (v_k, q_k) in self.rows() {
            for (a, vi) in acc.iter_mut().zip(v_k) {
                *a += (vi * vi) / q_k;
            }
        }
        let inv_lambda = 1.0 / self.cfg.lambda;
        acc.iter().map(|a| inv_lambda - a).collect()
    }

    pub fn to_container(&self, dtype: Dtype) -> Container {
        Container {
            kind: STATIC_KIND,
            dtype,
            m: self.cfg.m,
            d: self.cfg.dim,
            sections: vec![
                Section::new("CFG", Dtype::F64, 1, 1, vec![self.cfg.lambda]),
                Section::new("V", dtype, self.cfg.m, self.cfg.dim, self.v.clone()),
                Section::new("q", Dtype::F64, 1, self.cfg.m, self.q.clone()),
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let lambda = c.matrix("CFG", 1, 1)?[0];
        let cfg = FisherConfig::new(c.m, lambda, c.d)?.with_dtype(c.dtype);
        let v = c.matrix("V", c.m, c.d)?.to_vec();
        let q = c.matrix("q", 1, c.m)?.to_vec();
        Self::from_parts(v, q, &cfg)
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        std::fs::write(path, self.to_container(dtype).encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::decode(&std::fs::read(path)?, STATIC_KIND)?)
    }
}

impl InverseCurvature for StaticSketch {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn ihvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        StaticSketch::ihvp(self, x)
    }

    fn element(&self, i: usize, j: usize) -> Result<f64> {
        StaticSketch::element(self, i, j)
    }

    fn diag(&self) -> Vec<f64> {
        StaticSketch::diag(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_ihvp, dense_inverse_woodbury, fisher_product};
    use crate::synth::{gaussian_gradients, rng, normal_vec};
    use crate::linalg::relative_l2;
    use proptest::prelude::*;

    fn axis_instance() -> StaticSketch {
        let g = GradientMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        StaticSketch::build(g, &FisherConfig::new(1, 1.0, 2).unwrap()).unwrap()
    }

    #[test]
    fn single_gradient_by_hand() {
        let s = axis_instance();
        assert_eq!(s.v(), &[1.0, 0.0]);
        assert_eq!(s.q(), &[2.0]);
        assert_eq!(s.ihvp(&[1.0, 1.0]).unwrap(), vec![0.5, 1.0]);
        assert_eq!(s.element(0, 0).unwrap(), 0.5);
        assert_eq!(s.element(1, 1).unwrap(), 1.0);
        assert_eq!(s.diag(), vec![0.5, 1.0]);
        assert_eq!(s.row_select(&[0, 1]).unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn zero_gradients() {
        let cfg = FisherConfig::new(3, 4.0, 5).unwrap();
        let s = StaticSketch::build(GradientMatrix::zeros(3, 5).unwrap(), &cfg).unwrap();
        assert!(s.v().iter().all(|&x| x == 0.0));
        assert_eq!(s.q(), &[3.0, 3.0, 3.0]);
        let x = [1.0, -2.0, 3.0, 0.5, 8.0];
        assert_eq!(s.ihvp(&x).unwrap(), x.iter().map(|v| v / 4.0).collect::<Vec<_>>());
        assert_eq!(s.element(0, 3).unwrap(), 0.0);
        assert_eq!(s.diag(), vec![0.25; 5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = axis_instance();
        assert!(s.ihvp(&[1.0]).is_err());
        assert!(s.element(2, 0).is_err());
        assert!(s.row_select(&[0, 2]).is_err());
        let cfg = FisherConfig::new(2, 1.0, 2).unwrap();
        assert!(StaticSketch::build(GradientMatrix::zeros(1, 2).unwrap(), &cfg).is_err());
        assert!(matches!(
            StaticSketch::from_parts(vec![0.0; 4], vec![2.0, 1.5], &cfg),
            Err(MfacError::Denominator { index: 1, .. })
        ));
    }

    #[test]
    fn matches_dense_oracle() {
        let g = gaussian_gradients(8, 32, 1).unwrap();
        let cfg = FisherConfig::new(8, 1e-2, 32).unwrap();
        let s = StaticSketch::from_gradients(&g, &cfg).unwrap();
        let oracle = dense_inverse_woodbury(&g, &cfg).unwrap();
        let x = normal_vec(&mut rng(2), 32, 1.0);
        assert!(relative_l2(&s.ihvp(&x).unwrap(), &dense_ihvp(&oracle, &x).unwrap()) < 1e-10);

        let g = gaussian_gradients(16, 100, 3).unwrap();
        let cfg = FisherConfig::new(16, 1e-5, 100).unwrap();
        let s = StaticSketch::from_gradients(&g, &cfg).unwrap();
        let oracle = dense_inverse_woodbury(&g, &cfg).unwrap();
        let x = normal_vec(&mut rng(4), 100, 1.0);
        assert!(relative_l2(&s.ihvp(&x).unwrap(), &dense_ihvp(&oracle, &x).unwrap()) < 1e-10);
        for i in 0..100 {
            for j in 0..100 {
                let e = s.element(i, j).unwrap();
                assert!((e - oracle.inverse[(i, j)]).abs() < 1e-10 * oracle.inverse[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn row_select_matches_elements() {
        let g = gaussian_gradients(6, 20, 5).unwrap();
        let s = StaticSketch::from_gradients(&g, &FisherConfig::new(6, 0.1, 20).unwrap()).unwrap();
        let pi: Vec<usize> = (0..20).map(|i| (i * 7 + 3) % 20).collect();
        let y = s.row_select(&pi).unwrap();
        for i in 0..20 {
            assert_eq!(y[i], s.element(i, pi[i]).unwrap());
        }
        let ident: Vec<usize> = (0..20).collect();
        assert_eq!(s.row_select(&ident).unwrap(), s.diag());
    }

    #[test]
    fn container_round_trip_and_corruption() {
        let g = gaussian_gradients(4, 6, 8).unwrap();
        let s = StaticSketch::from_gradients(&g, &FisherConfig::new(4, 0.5, 6).unwrap()).unwrap();
        let c = s.to_container(Dtype::F64);
        assert_eq!(StaticSketch::from_container(&Container::decode(&c.encode(), STATIC_KIND).unwrap()).unwrap(), s);
        let mut bad = c.clone();
        bad.sections[2].data[1] = -1.0;
        assert!(matches!(StaticSketch::from_container(&bad), Err(MfacError::Denominator { index: 1, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn queries_are_consistent(m in 1usize..10, d in 1usize..24, seed in any::<u64>(), lexp in -3i32..1) {
            let lambda = 10f64.powi(lexp);
            let g = gaussian_gradients(m, d, seed).unwrap();
            let cfg = FisherConfig::new(m, lambda, d).unwrap();
            let s = StaticSketch::from_gradients(&g, &cfg).unwrap();
            let diag = s.diag();
            for j in 0..d {
                let mut e = vec![0.0; d];
                e[j] = 1.0;
                let col = s.ihvp(&e).unwrap();
                for i in 0..d {
                    let eij = s.element(i, j).unwrap();
                    prop_assert!((eij - col[i]).abs() <= 1e-12 * (1.0 / lambda).max(1.0));
                    prop_assert!((eij - s.element(j, i).unwrap()).abs() <= 1e-12 * (1.0 / lambda).max(1.0));
                }
                prop_assert_eq!(diag[j], s.element(j, j).unwrap());
                prop_assert!(diag[j] > 0.0);
            }
            let x = normal_vec(&mut rng(seed ^ 1), d, 1.0);
            let y = s.ihvp(&x).unwrap();
            prop_assert!(crate::linalg::dot(&x, &y) > 0.0);
            // inverse property through the matrix-free Fisher product
            let back = s.ihvp(&fisher_product(&g, lambda, &x)).unwrap();
            prop_assert!(relative_l2(&back, &x) < 1e-8);
        }

        #[test]
        fn row_permutation_leaves_queries_unchanged(m in 2usize..8, d in 2usize..16, seed in any::<u64>()) {
            let g = gaussian_gradients(m, d, seed).unwrap();
            let cfg = FisherConfig::new(m, 0.05, d).unwrap();
            let order: Vec<usize> = (0..m).rev().collect();
            let a = StaticSketch::from_gradients(&g, &cfg).unwrap();
            let b = StaticSketch::from_gradients(&g.permuted_rows(&order).unwrap(), &cfg).unwrap();
            let x = normal_vec(&mut rng(seed), d, 1.0);
            prop_assert!(relative_l2(&a.ihvp(&x).unwrap(), &b.ihvp(&x).unwrap()) < 1e-9);
            prop_assert!(relative_l2(&a.diag(), &b.diag()) < 1e-9);
            prop_assert!((a.element(0, d - 1).unwrap() - b.element(0, d - 1).unwrap()).abs() < 1e-9 * 20.0);
        }
    }
}

//! Sliding-window sketch supporting gradient replacement.
//!
//! Keeps the window `G` together with three `m x m` matrices:
//!
//! * `GGT[i][j] = g_i . g_j`
//! * `D[i][j] = g_i^T F_{i-1}^{-1} g_j` for `i <= j` (upper triangular)
//! * `B`, lower triangular with `F_{i-1}^{-1} g_i = sum_j B[i][j] g_j` and `B[i][i] = 1/lambda`
//!
//! An inverse-Fisher product is then `x / lambda - sum_j c_j g_j`, where the
//! coefficients `c` come out of an `O(m^2)` recursion over `G x`.
//!
//! While the window is not yet full the estimate covers only the occupied
//! slots, and the count of occupied slots replaces `m` in every denominator.

use std::path::Path;

use crate::config::{Dtype, FisherConfig};
use crate::curvature::{check_index, check_len, InverseCurvature};
use crate::error::{MfacError, Result};
use crate::gradients::GradientMatrix;
use crate::io::{Container, Section};
use crate::linalg::{axpy, dot};

/// Relative slack below the count before a pivot `n + D[i][i]` counts as broken.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// Container payload kind for dynamic checkpoints.
pub const DYNAMIC_KIND: u8 = 2;

/// Occupancy of the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowState {
    pub filled: usize,
    pub next_slot: usize,
    pub capacity: usize,
}

/// Intermediates of one product.
#[derive(Debug, Clone, PartialEq)]
pub struct IhvpWork {
    /// `G x`
    pub p: Vec<f64>,
    /// `(g_i^T F_{i-1}^{-1} x) / (n + D[i][i])`
    pub q: Vec<f64>,
    /// Final coefficients `c_j = sum_{k >= j} q_k B[k][j]`.
    pub c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DynamicSketch {
    cfg: FisherConfig,
    /// `m x d`, row per slot.
    grads: Vec<f64>,
    ggt: Vec<f64>,
    d: Vec<f64>,
    b: Vec<f64>,
    filled: usize,
    next_slot: usize,
}

impl DynamicSketch {
    /// An empty window of capacity `cfg.m`.
    pub fn new(cfg: &FisherConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.m;
        Ok(Self {
            cfg: cfg.clone(),
            grads: vec![0.0; m * cfg.dim],
            ggt: vec![0.0; m * m],
            d: vec![0.0; m * m],
            b: vec![0.0; m * m],
            filled: 0,
            next_slot: 0,
        })
    }

    /// A full window holding the rows of `gradients`; the next push replaces slot 0.
    pub fn setup(gradients: &GradientMatrix, cfg: &FisherConfig) -> Result<Self> {
        let mut s = Self::new(cfg)?;
        check_len(cfg.dim, gradients.cols())?;
        check_len(cfg.m, gradients.rows())?;
        s.grads.copy_from_slice(gradients.as_slice());
        let m = cfg.m;
        for i in 0..m {
            for j in i..m {
                let v = dot(s.slot(i), s.slot(j));
                s.ggt[i * m + j] = v;
                s.ggt[j * m + i] = v;
            }
        }
        s.filled = m;
        s.refresh_from(0)?;
        Ok(s)
    }

    pub fn config(&self) -> &FisherConfig {
        &self.cfg
    }

    pub fn window_state(&self) -> WindowState {
        WindowState {
            filled: self.filled,
            next_slot: self.next_slot,
            capacity: self.cfg.m,
        }
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.cfg.m
    }

    pub fn slot(&self, k: usize) -> &[f64] {
        &self.grads[k * self.cfg.dim..(k + 1) * self.cfg.dim]
    }

    /// Row-major `m x m` views; entries outside the occupied block are zero.
    pub fn ggt(&self) -> &[f64] {
        &self.ggt
    }

    pub fn d_matrix(&self) -> &[f64] {
        &self.d
    }

    pub fn b_matrix(&self) -> &[f64] {
        &self.b
    }

    /// The occupied slots as a gradient matrix.
    pub fn window(&self) -> Result<GradientMatrix> {
        GradientMatrix::from_flat(self.filled, self.cfg.dim, self.grads[..self.filled * self.cfg.dim].to_vec())
    }

    fn check_gradient(&self, g: &[f64]) -> Result<()> {
        check_len(self.cfg.dim, g.len())?;
        if let Some(col) = g.iter().position(|x| !x.is_finite()) {
            return Err(MfacError::NonFinite { row: 0, col });
        }
        Ok(())
    }

    /// Dot products of `g` with every occupied slot, with `slot` treated as holding `g`.
    fn products_with(&self, g: &[f64], slot: usize, rows: usize) -> Vec<f64> {
        (0..rows)
            .map(|j| if j == slot { dot(g, g) } else { dot(self.slot(j), g) })
            .collect()
    }

    fn write_slot(&mut self, k: usize, g: &[f64], p: &[f64]) {
        let d = self.cfg.dim;
        let m = self.cfg.m;
        self.grads[k * d..(k + 1) * d].copy_from_slice(g);
        for (j, &pj) in p.iter().enumerate() {
            self.ggt[k * m + j] = pj;
            self.ggt[j * m + k] = pj;
        }
    }

    /// Replaces the gradient in occupied slot `k` and refreshes rows/columns `>= k`.
    pub fn replace_gradient(&mut self, k: usize, g: &[f64]) -> Result<()> {
        check_index(k, self.cfg.m)?;
        if k >= self.filled {
            return Err(MfacError::Config(format!(
                "slot {k} is not occupied ({} filled); use push",
                self.filled
            )));
        }
        self.check_gradient(g)?;
        let p = self.products_with(g, k, self.filled);
        self.write_slot(k, g, &p);
        self.refresh_from(k)
    }

    /// Inserts `g` at the FIFO slot and returns the products `G g` over the updated window.
    fn push_with_products(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        self.check_gradient(g)?;
        let k = self.next_slot;
        let grows = k == self.filled;
        let rows = if grows { self.filled + 1 } else { self.filled };
        let p = self.products_with(g, k, rows);
        self.write_slot(k, g, &p);
        if grows {
            self.filled += 1;
            self.refresh_from(0)?;
        } else {
            self.refresh_from(k)?;
        }
        self.next_slot = (k + 1) % self.cfg.m;
        Ok(p)
    }

    /// Inserts `g`, replacing the oldest gradient once the window is full.
    pub fn push(&mut self, g: &[f64]) -> Result<()> {
        self.push_with_products(g).map(|_| ())
    }

    /// Pushes `g` and returns `F^{-1} g` for the updated window, reusing `G g`
    /// from the update for the product.
    pub fn update_and_ihvp(&mut self, g: &[f64]) -> Result<Vec<f64>> {
        let p = self.push_with_products(g)?;
        Ok(self.product_from(g, p).0)
    }

    pub fn ihvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.ihvp_with_work(x).map(|(y, _)| y)
    }

    pub fn ihvp_with_work(&self, x: &[f64]) -> Result<(Vec<f64>, IhvpWork)> {
        check_len(self.cfg.dim, x.len())?;
        if self.filled == 0 {
            return Err(MfacError::EmptySketch);
        }
        let p: Vec<f64> = (0..self.filled).map(|j| dot(self.slot(j), x)).collect();
        Ok(self.product_from(x, p))
    }

    fn product_from(&self, x: &[f64], p: Vec<f64>) -> (Vec<f64>, IhvpWork) {
        let n = self.filled;
        let m = self.cfg.m;
        let nf = n as f64;
        let inv_lambda = 1.0 / self.cfg.lambda;

        let mut q: Vec<f64> = p.iter().map(|v| inv_lambda * v).collect();
        q[0] /= nf + self.d[0];
        for i in 1..n {
            let prev = q[i - 1];
            let drow = &self.d[(i - 1) * m..(i - 1) * m + n];
            for c in i..n {
                q[c] -= prev * drow[c];
            }
            q[i] /= nf + self.d[i * m + i];
        }

        let mut c = vec![0.0; n];
        for (k, &qk) in q.iter().enumerate() {
            axpy(qk, &self.b[k * m..k * m + n], &mut c);
        }

        let mut out: Vec<f64> = x.iter().map(|xi| inv_lambda * xi).collect();
        for (j, &cj) in c.iter().enumerate() {
            axpy(-cj, self.slot(j), &mut out);
        }
        (out, IhvpWork { p, q, c })
    }

    /// Coefficients `c_j = sum_{k >= j} numerators[k] / (n + D[k][k]) * B[k][j]`,
    /// where `numerators[k]` must be `g_k^T F_{k-1}^{-1} x`.
    pub fn coefficients_from_numerators(&self, numerators: &[f64]) -> Result<Vec<f64>> {
        let n = self.filled;
        let m = self.cfg.m;
        check_len(n, numerators.len())?;
        let nf = n as f64;
        Ok((0..n)
            .map(|j| {
                (j..n)
                    .map(|k| numerators[k] / (nf + self.d[k * m + k]) * self.b[k * m + j])
                    .sum()
            })
            .collect())
    }

    /// Recomputes `D` and `B` assuming slots `< k` are unchanged since the last refresh
    /// (and the occupied count too, unless `k == 0`).
    fn refresh_from(&mut self, k: usize) -> Result<()> {
        let n = self.filled;
        let m = self.cfg.m;
        let nf = n as f64;
        let inv_lambda = 1.0 / self.cfg.lambda;
        let d = &mut self.d;
        let ggt = &self.ggt;

        // Column k above the diagonal.
        for i in 0..k.min(n) {
            let mut v = inv_lambda * ggt[i * m + k];
            for l in 0..i {
                v -= d[l * m + i] * d[l * m + k] / (nf + d[l * m + l]);
            }
            d[i * m + k] = v;
        }
        // Trailing block after eliminating the first k gradients.
        for r in k..n {
            for c in r..n {
                let mut v = inv_lambda * ggt[r * m + c];
                for l in 0..k {
                    v -= d[l * m + r] * d[l * m + c] / (nf + d[l * m + l]);
                }
                d[r * m + c] = v;
            }
        }
        // Continue the elimination sweep.
        for i in k..n {
            let pivot = nf + d[i * m + i];
            let bound = nf * (1.0 - PIVOT_TOLERANCE);
            if !(pivot.is_finite() && pivot >= bound) {
                return Err(MfacError::Denominator {
                    index: i,
                    value: pivot,
                    bound,
                });
            }
            for r in i + 1..n {
                let f = d[i * m + r] / pivot;
                if f == 0.0 {
                    continue;
                }
                for c in r..n {
                    d[r * m + c] -= f * d[i * m + c];
                }
            }
        }
        // Rows of D below an occupied count are unused.
        for r in n..m {
            d[r * m..(r + 1) * m].fill(0.0);
        }

        let b = &mut self.b;
        for i in k..n {
            b[i * m..(i + 1) * m].fill(0.0);
            b[i * m + i] = inv_lambda;
            for l in 0..i {
                let f = -d[l * m + i] / (nf + d[l * m + l]);
                if f == 0.0 {
                    continue;
                }
                let (head, tail) = b.split_at_mut(i * m);
                axpy(f, &head[l * m..l * m + l + 1], &mut tail[..l + 1]);
            }
        }
        for r in n..m {
            b[r * m..(r + 1) * m].fill(0.0);
        }

        if let Some(pos) = self.d.iter().chain(self.b.iter()).position(|x| !x.is_finite()) {
            return Err(MfacError::Numerical(format!(
                "non-finite coefficient while refreshing from slot {k} (entry {pos})"
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let m = self.cfg.m;
        Container {
            kind: DYNAMIC_KIND,
            dtype: Dtype::F64,
            m,
            d: self.cfg.dim,
            sections: vec![
                Section::new(
                    "CFG",
                    Dtype::F64,
                    1,
                    3,
                    vec![self.cfg.lambda, self.filled as f64, self.next_slot as f64],
                ),
                Section::new("G", Dtype::F64, m, self.cfg.dim, self.grads.clone()),
                Section::new("GGT", Dtype::F64, m, m, self.ggt.clone()),
                Section::new("D", Dtype::F64, m, m, self.d.clone()),
                Section::new("B", Dtype::F64, m, m, self.b.clone()),
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.matrix("CFG", 1, 3)?;
        let cfg = FisherConfig::new(c.m, meta[0], c.d)?;
        let filled = meta[1] as usize;
        let next_slot = meta[2] as usize;
        if filled > c.m || next_slot >= c.m || meta[1].fract() != 0.0 || meta[2].fract() != 0.0 {
            return Err(MfacError::Format(format!("bad window counters {meta:?}")));
        }
        let s = Self {
            grads: c.matrix("G", c.m, c.d)?.to_vec(),
            ggt: c.matrix("GGT", c.m, c.m)?.to_vec(),
            d: c.matrix("D", c.m, c.m)?.to_vec(),
            b: c.matrix("B", c.m, c.m)?.to_vec(),
            cfg,
            filled,
            next_slot,
        };
        if s.grads.iter().chain(&s.ggt).chain(&s.d).chain(&s.b).any(|x| !x.is_finite()) {
            return Err(MfacError::Format("checkpoint holds non-finite values".into()));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_container().encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::decode(&std::fs::read(path)?, DYNAMIC_KIND)?)
    }
}

/// Entry queries go through the product with a unit vector, `O(dm + m^2)` each.
impl InverseCurvature for DynamicSketch {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn ihvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        DynamicSketch::ihvp(self, x)
    }

    fn element(&self, i: usize, j: usize) -> Result<f64> {
        check_index(i, self.cfg.dim)?;
        let mut e = vec![0.0; self.cfg.dim];
        check_index(j, self.cfg.dim)?;
        e[j] = 1.0;
        Ok(self.ihvp(&e)?[i])
    }

    fn diag(&self) -> Vec<f64> {
        (0..self.cfg.dim)
            .map(|i| self.element(i, i).unwrap_or(f64::NAN))
            .collect()
    }
}

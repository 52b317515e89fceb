//! Desk-scale losses that supply gradients at a given parameter vector.

use rand::Rng;

use crate::curvature::check_len;
use crate::error::{MfacError, Result};
use crate::gradients::GradientMatrix;
use crate::linalg::dot;
use crate::oracle::fisher_product;
use crate::synth::{normal_vec, rng};

/// Loss with full-batch and per-sample gradients.
pub trait GradientProvider {
    fn dim(&self) -> usize;

    fn loss(&self, theta: &[f64]) -> Result<f64>;

    /// Gradient of [`GradientProvider::loss`].
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// `count` per-sample gradients at `theta`, drawn deterministically from `seed`.
    fn sample_gradients(&self, theta: &[f64], count: usize, seed: u64) -> Result<GradientMatrix>;
}

/// `L(theta) = 0.5 (theta - c)^T A (theta - c)` with `A = lambda I + (1/m) G^T G`.
///
/// The per-sample gradients are the rows of `G`, so the empirical Fisher they
/// induce is exactly the Hessian `A`.
#[derive(Debug, Clone)]
pub struct QuadraticProvider {
    factors: GradientMatrix,
    lambda: f64,
    center: Vec<f64>,
}

impl QuadraticProvider {
    pub fn new(factors: GradientMatrix, lambda: f64, center: Vec<f64>) -> Result<Self> {
        check_len(factors.cols(), center.len())?;
        if !(lambda > 0.0) {
            return Err(MfacError::Config("lambda must be positive".into()));
        }
        Ok(Self { factors, lambda, center })
    }

    pub fn factors(&self) -> &GradientMatrix {
        &self.factors
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// `0.5 delta^T A delta`
    pub fn curvature_energy(&self, delta: &[f64]) -> f64 {
        0.5 * dot(delta, &fisher_product(&self.factors, self.lambda, delta))
    }

    fn offset(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.center.len(), theta.len())?;
        Ok(theta.iter().zip(&self.center).map(|(t, c)| t - c).collect())
    }
}

impl GradientProvider for QuadraticProvider {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.curvature_energy(&self.offset(theta)?))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(fisher_product(&self.factors, self.lambda, &self.offset(theta)?))
    }

    /// Rows of `G`, cycled if more are requested than stored.
    fn sample_gradients(&self, theta: &[f64], count: usize, _seed: u64) -> Result<GradientMatrix> {
        check_len(self.center.len(), theta.len())?;
        let rows: Vec<&[f64]> = (0..count).map(|i| self.factors.row(i % self.factors.rows())).collect();
        GradientMatrix::from_rows(&rows)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// L2-regularized logistic regression on a fixed design.
#[derive(Debug, Clone)]
pub struct LogisticProvider {
    features: GradientMatrix,
    labels: Vec<f64>,
    ridge: f64,
}

impl LogisticProvider {
    pub fn new(features: GradientMatrix, labels: Vec<f64>, ridge: f64) -> Result<Self> {
        check_len(features.rows(), labels.len())?;
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(MfacError::Config("labels must be 0 or 1".into()));
        }
        if !(ridge >= 0.0) {
            return Err(MfacError::Config("ridge must be non-negative".into()));
        }
        Ok(Self {
            features,
            labels,
            ridge,
        })
    }

    /// Standard normal features; labels drawn from a logistic teacher with
    /// margin scale `teacher_scale`, so classes overlap and the optimum is finite.
    pub fn synthetic(n: usize, d: usize, teacher_scale: f64, ridge: f64, seed: u64) -> Result<Self> {
        let mut r = rng(seed);
        let teacher = normal_vec(&mut r, d, teacher_scale / (d as f64).sqrt());
        let x = normal_vec(&mut r, n * d, 1.0);
        let features = GradientMatrix::from_flat(n, d, x)?;
        let labels = features
            .iter_rows()
            .map(|row| {
                let p = sigmoid(dot(row, &teacher));
                if r.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(features, labels, ridge)
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    /// Residual `sigmoid(x_i . theta) - y_i` of one sample.
    fn residual(&self, i: usize, theta: &[f64]) -> f64 {
        sigmoid(dot(self.features.row(i), theta)) - self.labels[i]
    }

    pub fn sample_gradient(&self, i: usize, theta: &[f64]) -> Vec<f64> {
        let r = self.residual(i, theta);
        self.features
            .row(i)
            .iter()
            .zip(theta)
            .map(|(x, t)| r * x + self.ridge * t)
            .collect()
    }
}

impl GradientProvider for LogisticProvider {
    fn dim(&self) -> usize {
        self.features.cols()
    }

    fn loss(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.dim(), theta.len())?;
        let n = self.samples() as f64;
        let data: f64 = self
            .features
            .iter_rows()
            .zip(&self.labels)
            .map(|(row, y)| {
                let z = dot(row, theta);
                softplus(z) - y * z
            })
            .sum();
        Ok(data / n + 0.5 * self.ridge * dot(theta, theta))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), theta.len())?;
        let n = self.samples() as f64;
        let residuals: Vec<f64> = (0..self.samples()).map(|i| self.residual(i, theta) / n).collect();
        let mut g = self.features.transpose_matvec(&residuals);
        for (gi, t) in g.iter_mut().zip(theta) {
            *gi += self.ridge * t;
        }
        Ok(g)
    }

    fn sample_gradients(&self, theta: &[f64], count: usize, seed: u64) -> Result<GradientMatrix> {
        check_len(self.dim(), theta.len())?;
        let mut r = rng(seed);
        let rows: Vec<Vec<f64>> = (0..count)
            .map(|_| self.sample_gradient(r.random_range(0..self.samples()), theta))
            .collect();
        GradientMatrix::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_gradients;

    fn finite_difference(p: &impl GradientProvider, theta: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..theta.len())
            .map(|i| {
                let mut a = theta.to_vec();
                let mut b = theta.to_vec();
                a[i] += h;
                b[i] -= h;
                (p.loss(&a).unwrap() - p.loss(&b).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let p = LogisticProvider::synthetic(40, 6, 3.0, 1e-2, 1).unwrap();
        let theta = normal_vec(&mut rng(2), 6, 0.5);
        let fd = finite_difference(&p, &theta);
        let g = p.gradient(&theta).unwrap();
        assert!(crate::linalg::max_abs_diff(&fd, &g) < 1e-7);
        // full gradient is the mean of per-sample gradients
        let mean: Vec<f64> = (0..6)
            .map(|j| (0..40).map(|i| p.sample_gradient(i, &theta)[j]).sum::<f64>() / 40.0)
            .collect();
        assert!(crate::linalg::max_abs_diff(&mean, &g) < 1e-14);
    }

    #[test]
    fn quadratic_gradient_matches_finite_differences() {
        let g = gaussian_gradients(4, 5, 3).unwrap();
        let p = QuadraticProvider::new(g, 0.1, vec![1.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let theta = [0.2, 0.1, -0.3, 0.7, 1.0];
        assert!(crate::linalg::max_abs_diff(&finite_difference(&p, &theta), &p.gradient(&theta).unwrap()) < 1e-7);
        assert_eq!(p.loss(p.center()).unwrap(), 0.0);
        assert_eq!(p.sample_gradients(&theta, 6, 0).unwrap().row(5), p.factors().row(1));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = LogisticProvider::synthetic(30, 4, 2.0, 0.0, 5).unwrap();
        let theta = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(p.sample_gradients(&theta, 8, 3).unwrap(), p.sample_gradients(&theta, 8, 3).unwrap());
    }
}

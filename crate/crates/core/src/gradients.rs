//! Gradient storage, parameter vectors and coordinate blocks.

use std::ops::Range;

use crate::config::{BlockSize, Dtype};
use crate::error::{MfacError, Result};

/// Row-major `m x d` matrix whose rows are the gradients defining a Fisher sum.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    provenance: Option<Vec<String>>,
}

impl GradientMatrix {
    /// Wrap a row-major buffer. Every entry must be finite.
    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(MfacError::Config("gradient dimension must be at least 1".into()));
        }
        if data.len() != rows * cols {
            return Err(MfacError::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(MfacError::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            provenance: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(MfacError::Format(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_flat(rows, cols, vec![0.0; rows * cols])
    }

    pub fn with_provenance(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.rows {
            return Err(MfacError::DimensionMismatch {
                expected: self.rows,
                actual: ids.len(),
            });
        }
        self.provenance = Some(ids);
        Ok(self)
    }

    pub fn provenance(&self) -> Option<&[String]> {
        self.provenance.as_deref()
    }

    /// Number of gradients `m`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Gradient length `d`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Round every entry to the given storage precision.
    pub fn quantized(mut self, dtype: Dtype) -> Self {
        if dtype == Dtype::F32 {
            for x in &mut self.data {
                *x = dtype.quantize(*x);
            }
        }
        self
    }

    /// The columns in `range` of every row, as a new matrix.
    pub fn column_slice(&self, range: Range<usize>) -> GradientMatrix {
        let width = range.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[range.clone()]);
        }
        GradientMatrix {
            rows: self.rows,
            cols: width,
            data,
            provenance: self.provenance.clone(),
        }
    }

    /// Copy with coordinates in `mask` set to zero in every row.
    pub fn masked(&self, mask: &[usize]) -> GradientMatrix {
        let mut out = self.clone();
        for r in out.data.chunks_exact_mut(self.cols) {
            for &i in mask {
                r[i] = 0.0;
            }
        }
        out
    }

    /// Copy with rows reordered so that row `i` of the result is row `order[i]` of `self`.
    pub fn permuted_rows(&self, order: &[usize]) -> Result<GradientMatrix> {
        let rows: Vec<&[f64]> = order
            .iter()
            .map(|&i| {
                if i < self.rows {
                    Ok(self.row(i))
                } else {
                    Err(MfacError::IndexOutOfRange { index: i, len: self.rows })
                }
            })
            .collect::<Result<_>>()?;
        GradientMatrix::from_rows(&rows)
    }

    /// Product `G x`, one dot product per row.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.iter_rows().map(|r| crate::linalg::dot(r, x)).collect()
    }

    /// Product `G^T c`.
    pub fn transpose_matvec(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &ci) in self.iter_rows().zip(c) {
            crate::linalg::axpy(ci, r, &mut out);
        }
        out
    }
}

/// Averages consecutive groups of `batch` rows.
///
/// Turns per-sample gradients into mini-batch gradients that are then treated
/// as single samples of the Fisher sum.
pub fn batch_average_gradients(per_sample: &GradientMatrix, batch: usize) -> Result<GradientMatrix> {
    if batch == 0 {
        return Err(MfacError::Config("batch size must be positive".into()));
    }
    if !per_sample.rows().is_multiple_of(batch) {
        return Err(MfacError::Config(format!(
            "{} gradients cannot be split into batches of {batch}",
            per_sample.rows()
        )));
    }
    let d = per_sample.cols();
    let groups = per_sample.rows() / batch;
    let mut data = vec![0.0; groups * d];
    for (g, out) in data.chunks_exact_mut(d).enumerate() {
        for r in 0..batch {
            crate::linalg::axpy(1.0, per_sample.row(g * batch + r), out);
        }
        let inv = 1.0 / batch as f64;
        for x in out.iter_mut() {
            *x *= inv;
        }
    }
    GradientMatrix::from_flat(groups, d, data)
}

/// Flattened model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if let Some(pos) = theta.iter().position(|x| !x.is_finite()) {
            return Err(MfacError::NonFinite { row: 0, col: pos });
        }
        Ok(Self(theta))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Partition of `[0, d)` into contiguous blocks of a fixed width; the last block may be shorter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    dim: usize,
    width: usize,
}

impl BlockLayout {
    pub fn new(dim: usize, block_size: BlockSize) -> Result<Self> {
        if dim == 0 {
            return Err(MfacError::Config("dim must be at least 1".into()));
        }
        let width = match block_size {
            BlockSize::Full => dim,
            BlockSize::Width(w) if w >= 1 && w <= dim => w,
            BlockSize::Width(w) => {
                return Err(MfacError::Config(format!("block size {w} must lie in [1, {dim}]")))
            }
        };
        Ok(Self { dim, width })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.dim.div_ceil(self.width)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn block(&self, b: usize) -> Range<usize> {
        let start = b * self.width;
        start..(start + self.width).min(self.dim)
    }

    pub fn blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.len()).map(|b| self.block(b))
    }

    /// Index of the block owning coordinate `i`.
    pub fn block_of(&self, i: usize) -> usize {
        i / self.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite_with_location() {
        let err = GradientMatrix::from_flat(2, 3, vec![0.0, 1.0, 2.0, 3.0, f64::NAN, 5.0]).unwrap_err();
        assert!(matches!(err, MfacError::NonFinite { row: 1, col: 1 }));
    }

    #[test]
    fn batch_mean_of_two_rows() {
        let g = GradientMatrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let avg = batch_average_gradients(&g, 2).unwrap();
        assert_eq!(avg.rows(), 1);
        assert_eq!(avg.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn batch_of_one_is_identity() {
        let g = GradientMatrix::from_rows(&[[2.0, -1.0], [0.5, 2.0], [3.0, 3.0]]).unwrap();
        assert_eq!(batch_average_gradients(&g, 1).unwrap(), g);
    }

    #[test]
    fn batch_requires_divisibility() {
        let g = GradientMatrix::zeros(3, 2).unwrap();
        assert!(batch_average_gradients(&g, 2).is_err());
        assert!(batch_average_gradients(&g, 0).is_err());
    }

    /// Kahan-summed group means as an independent reference.
    fn compensated_mean(rows: &[&[f64]]) -> Vec<f64> {
        let d = rows[0].len();
        (0..d)
            .map(|j| {
                let (mut sum, mut c) = (0.0f64, 0.0f64);
                for r in rows {
                    let y = r[j] - c;
                    let t = sum + y;
                    c = (t - sum) - y;
                    sum = t;
                }
                sum / rows.len() as f64
            })
            .collect()
    }

    #[test]
    fn batch_means_match_compensated_summation() {
        let g = crate::synth::gaussian_gradients(16, 7, 11).unwrap();
        let avg = batch_average_gradients(&g, 4).unwrap();
        assert_eq!(avg.rows(), 4);
        for b in 0..4 {
            let group: Vec<&[f64]> = (0..4).map(|r| g.row(4 * b + r)).collect();
            let expected = compensated_mean(&group);
            for (x, y) in avg.row(b).iter().zip(&expected) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn layout_is_a_partition(dim in 1usize..300, width in 1usize..300) {
            let width = width.min(dim);
            let layout = BlockLayout::new(dim, BlockSize::Width(width)).unwrap();
            let mut next = 0;
            let mut total = 0;
            for (b, r) in layout.blocks().enumerate() {
                prop_assert_eq!(r.start, next);
                prop_assert!(!r.is_empty());
                for i in r.clone() {
                    prop_assert_eq!(layout.block_of(i), b);
                }
                next = r.end;
                total += r.len();
            }
            prop_assert_eq!(next, dim);
            prop_assert_eq!(total, dim);
        }
    }
}

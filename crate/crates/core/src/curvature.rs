use crate::error::{MfacError, Result};

/// Read access to an inverse-Fisher estimate.
pub trait InverseCurvature {
    fn dim(&self) -> usize;

    /// `F^{-1} x`
    fn ihvp(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// `[F^{-1}]_{ij}`
    fn element(&self, i: usize, j: usize) -> Result<f64>;

    /// Diagonal of `F^{-1}`.
    fn diag(&self) -> Vec<f64>;
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(MfacError::DimensionMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(MfacError::IndexOutOfRange { index, len });
    }
    Ok(())
}

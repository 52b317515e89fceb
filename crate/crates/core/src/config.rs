//! Numeric configuration shared by every sketch.

use crate::error::{MfacError, Result};

/// Dampening used for pruning when the caller does not choose one.
pub const DEFAULT_PRUNING_LAMBDA: f64 = 1e-5;

/// Sliding-window length used by the optimizer when the caller does not choose one.
pub const DEFAULT_WINDOW: usize = 512;

/// Storage precision for gradients on disk and at ingestion.
///
/// Arithmetic is always carried out in `f64`; `F32` rounds every ingested
/// value through single precision and writes 4-byte values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(MfacError::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Round a value to this precision.
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F64 => x,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = MfacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(MfacError::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Width of the coordinate blocks used by the block-diagonal approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockSize {
    #[default]
    Full,
    Width(usize),
}

impl std::str::FromStr for BlockSize {
    type Err = MfacError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(BlockSize::Full);
        }
        s.parse::<usize>()
            .map(BlockSize::Width)
            .map_err(|_| MfacError::Config(format!("block size must be a positive integer or `full`, got `{s}`")))
    }
}

/// Sizes and dampening of an empirical Fisher estimate
/// `lambda * I + (1/m) * sum_i g_i g_i^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherConfig {
    /// Number of rank-one terms (also the sliding-window length).
    pub m: usize,
    /// Dampening added to the diagonal.
    pub lambda: f64,
    /// Flattened parameter count.
    pub dim: usize,
    pub block_size: BlockSize,
    pub dtype: Dtype,
}

impl FisherConfig {
    pub fn new(m: usize, lambda: f64, dim: usize) -> Result<Self> {
        let cfg = Self {
            m,
            lambda,
            dim,
            block_size: BlockSize::Full,
            dtype: Dtype::F64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_block_size(mut self, block_size: BlockSize) -> Result<Self> {
        self.block_size = block_size;
        self.validate()?;
        Ok(self)
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(MfacError::Config(format!("lambda must be positive and finite, got {}", self.lambda)));
        }
        if self.m == 0 {
            return Err(MfacError::Config("m must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(MfacError::Config("dim must be at least 1".into()));
        }
        if let BlockSize::Width(w) = self.block_size {
            if w == 0 || w > self.dim {
                return Err(MfacError::Config(format!(
                    "block size {w} must lie in [1, {}]",
                    self.dim
                )));
            }
        }
        Ok(())
    }

    /// A copy of this config describing a different coordinate count.
    pub(crate) fn with_dim(&self, dim: usize) -> Self {
        Self {
            dim,
            block_size: BlockSize::Full,
            ..self.clone()
        }
    }
}

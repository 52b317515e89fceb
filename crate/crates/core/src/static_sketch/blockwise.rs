use rayon::prelude::*;

use super::StaticSketch;
use crate::config::FisherConfig;
use crate::curvature::{check_index, check_len, InverseCurvature};
use crate::error::Result;
use crate::gradients::{BlockLayout, GradientMatrix};

/// Independent static sketches over contiguous coordinate blocks.
///
/// Models the Fisher as block-diagonal: entries coupling two different
/// blocks are exactly zero.
#[derive(Debug, Clone)]
pub struct BlockStaticSketch {
    layout: BlockLayout,
    blocks: Vec<StaticSketch>,
}

impl BlockStaticSketch {
    /// Blocks are built in parallel.
    pub fn build(gradients: &GradientMatrix, cfg: &FisherConfig) -> Result<Self> {
        cfg.validate()?;
        check_len(cfg.dim, gradients.cols())?;
        let layout = BlockLayout::new(cfg.dim, cfg.block_size)?;
        let ranges: Vec<_> = layout.blocks().collect();
        let blocks = ranges
            .into_par_iter()
            .map(|r| {
                let sub_cfg = cfg.with_dim(r.len());
                StaticSketch::build(gradients.column_slice(r), &sub_cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layout, blocks })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[StaticSketch] {
        &self.blocks
    }

    pub fn ihvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.layout.dim(), x.len())?;
        let mut out = Vec::with_capacity(x.len());
        for (r, s) in self.layout.blocks().zip(&self.blocks) {
            out.extend(s.ihvp(&x[r])?);
        }
        Ok(out)
    }

    pub fn element(&self, i: usize, j: usize) -> Result<f64> {
        check_index(i, self.layout.dim())?;
        check_index(j, self.layout.dim())?;
        let b = self.layout.block_of(i);
        if b != self.layout.block_of(j) {
            return Ok(0.0);
        }
        let start = self.layout.block(b).start;
        self.blocks[b].element(i - start, j - start)
    }

    pub fn diag(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|s| s.diag()).collect()
    }
}

impl InverseCurvature for BlockStaticSketch {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn ihvp(&self, x: &[f64]) -> Result<Vec<f64>> {
        BlockStaticSketch::ihvp(self, x)
    }

    fn element(&self, i: usize, j: usize) -> Result<f64> {
        BlockStaticSketch::element(self, i, j)
    }

    fn diag(&self) -> Vec<f64> {
        BlockStaticSketch::diag(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BlockSize;
    use crate::oracle::{dense_ihvp, dense_inverse_direct};
    use crate::synth::{gaussian_gradients, normal_vec, rng};

    #[test]
    fn single_block_equals_plain_sketch() {
        let g = gaussian_gradients(5, 12, 1).unwrap();
        let cfg = FisherConfig::new(5, 0.1, 12).unwrap().with_block_size(BlockSize::Width(12)).unwrap();
        let blocked = BlockStaticSketch::build(&g, &cfg).unwrap();
        let plain = StaticSketch::from_gradients(&g, &cfg).unwrap();
        let x = normal_vec(&mut rng(3), 12, 1.0);
        assert_eq!(blocked.ihvp(&x).unwrap(), plain.ihvp(&x).unwrap());
        assert_eq!(blocked.diag(), plain.diag());
        assert_eq!(blocked.element(3, 7).unwrap(), plain.element(3, 7).unwrap());
    }

    #[test]
    fn empty_block_acts_as_scaled_identity() {
        let g = GradientMatrix::from_rows(&[[1.0, 2.0, 0.0, 0.0], [0.5, -1.0, 0.0, 0.0]]).unwrap();
        let cfg = FisherConfig::new(2, 0.5, 4).unwrap().with_block_size(BlockSize::Width(2)).unwrap();
        let s = BlockStaticSketch::build(&g, &cfg).unwrap();
        let y = s.ihvp(&[1.0, 1.0, 3.0, -4.0]).unwrap();
        assert_eq!(&y[2..], &[6.0, -8.0]);
        assert_eq!(s.element(2, 2).unwrap(), 2.0);
        assert_eq!(s.element(2, 3).unwrap(), 0.0);
        assert_eq!(s.element(0, 3).unwrap(), 0.0);
        assert_eq!(&s.diag()[2..], &[2.0, 2.0]);
    }

    #[test]
    fn matches_per_block_oracle() {
        let (m, d, w) = (6, 40, 16);
        let g = gaussian_gradients(m, d, 9).unwrap();
        let cfg = FisherConfig::new(m, 1e-3, d).unwrap().with_block_size(BlockSize::Width(w)).unwrap();
        let s = BlockStaticSketch::build(&g, &cfg).unwrap();
        assert_eq!(s.blocks().len(), 3);
        let x = normal_vec(&mut rng(1), d, 1.0);
        let y = s.ihvp(&x).unwrap();
        for r in s.layout().blocks() {
            let sub = g.column_slice(r.clone());
            let oracle = dense_inverse_direct(&sub, &cfg.with_dim(r.len())).unwrap();
            let expect = dense_ihvp(&oracle, &x[r.clone()]).unwrap();
            assert!(crate::linalg::relative_l2(&y[r], &expect) < 1e-10);
        }
    }
}

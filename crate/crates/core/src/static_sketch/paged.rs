//! Static setup with the gradient set held in a slow tier.
//!
//! The `m` gradients are split into `k` pages. Page `i` is converted from
//! gradients to `v` rows by streaming each of its gradients against the
//! already finished pages `0..i` one page at a time, accumulating partial
//! corrections into a page-sized buffer; the buffer is then brought in next
//! to page `i` to finish the in-page terms. A fast tier with a fixed row
//! budget tracks residency, so a schedule that would exceed the budget
//! fails instead of silently loading more.

use super::{accumulate_corrections, check_denominator, finish_row, StaticSketch};
use crate::config::FisherConfig;
use crate::curvature::check_len;
use crate::error::{MfacError, Result};
use crate::gradients::GradientMatrix;
use crate::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PagingConfig {
    /// Number of pages `k`.
    pub pages: usize,
    /// Fast-tier capacity, in gradient rows.
    pub fast_budget_rows: usize,
}

impl PagingConfig {
    /// Smallest budget that fits two pages of `page_rows` (or a page plus two streamed rows).
    pub fn required_budget(page_rows: usize) -> usize {
        (2 * page_rows).max(page_rows + 2)
    }

    /// `pages` pages with exactly the minimal budget.
    pub fn tight(pages: usize, m: usize) -> Self {
        let page_rows = m.div_ceil(pages.max(1));
        Self {
            pages,
            fast_budget_rows: Self::required_budget(page_rows),
        }
    }
}

/// Page-transfer accounting of one paged setup.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransferStats {
    pub page_loads: usize,
    pub page_stores: usize,
    pub row_loads: usize,
    pub peak_resident_rows: usize,
}

/// Gradient pages living in the slow tier.
#[derive(Debug, Clone)]
pub struct PagedGradientStore {
    dim: usize,
    pages: Vec<Vec<f64>>,
}

impl PagedGradientStore {
    /// Split into `k` contiguous pages of at most `ceil(m / k)` rows.
    pub fn split(gradients: GradientMatrix, k: usize) -> Result<Self> {
        let m = gradients.rows();
        if k == 0 || k > m.max(1) {
            return Err(MfacError::Config(format!("cannot split {m} gradients into {k} pages")));
        }
        let d = gradients.cols();
        let per = m.div_ceil(k);
        let flat = gradients.into_flat();
        let pages: Vec<Vec<f64>> = flat.chunks(per * d).map(|c| c.to_vec()).collect();
        Self::from_pages(d, pages)
    }

    /// Pages given explicitly; all but the last must have the same row count.
    pub fn from_pages(dim: usize, pages: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 || pages.is_empty() {
            return Err(MfacError::Config("paged store needs at least one page and d >= 1".into()));
        }
        let first = pages[0].len();
        for (i, p) in pages.iter().enumerate() {
            if p.len() % dim != 0 || p.is_empty() {
                return Err(MfacError::Config(format!(
                    "page {i} holds {} values, not a positive multiple of d = {dim}",
                    p.len()
                )));
            }
            if i + 1 < pages.len() && p.len() != first {
                return Err(MfacError::Config(format!("page {i} size differs from page 0")));
            }
            if p.len() > first {
                return Err(MfacError::Config(format!("last page {i} is larger than page 0")));
            }
        }
        Ok(Self { dim, pages })
    }

    pub fn page_rows(&self) -> usize {
        self.pages[0].len() / self.dim
    }

    pub fn total_rows(&self) -> usize {
        self.pages.iter().map(|p| p.len() / self.dim).sum()
    }

    pub fn num_pages(&self) -> usize {
        self.pages.len()
    }
}

struct FastTier {
    budget: usize,
    resident: usize,
    stats: TransferStats,
}

impl FastTier {
    fn acquire(&mut self, rows: usize) -> Result<()> {
        if self.resident + rows > self.budget {
            return Err(MfacError::Config(format!(
                "fast tier budget of {} rows exceeded ({} resident, {rows} requested)",
                self.budget, self.resident
            )));
        }
        self.resident += rows;
        self.stats.peak_resident_rows = self.stats.peak_resident_rows.max(self.resident);
        Ok(())
    }

    fn release(&mut self, rows: usize) {
        self.resident -= rows;
    }

    fn load_page(&mut self, rows: usize) -> Result<()> {
        self.acquire(rows)?;
        self.stats.page_loads += 1;
        Ok(())
    }

    fn load_row(&mut self) -> Result<()> {
        self.acquire(1)?;
        self.stats.row_loads += 1;
        Ok(())
    }
}

/// Out-of-core static setup. Produces the same `V` and `q` as
/// [`StaticSketch::build`], bit for bit.
pub fn paged_static_setup(
    store: PagedGradientStore,
    cfg: &FisherConfig,
    paging: PagingConfig,
) -> Result<(StaticSketch, TransferStats)> {
    cfg.validate()?;
    check_len(cfg.dim, store.dim)?;
    check_len(cfg.m, store.total_rows())?;
    if paging.pages != store.num_pages() {
        return Err(MfacError::Config(format!(
            "paging config expects {} pages, store holds {}",
            paging.pages,
            store.num_pages()
        )));
    }
    let page_rows = store.page_rows();
    let need = PagingConfig::required_budget(page_rows);
    if paging.fast_budget_rows < need {
        return Err(MfacError::Config(format!(
            "fast budget of {} rows is below the {need} rows needed for pages of {page_rows}",
            paging.fast_budget_rows
        )));
    }

    let d = cfg.dim;
    let m = cfg.m as f64;
    let inv_lambda = 1.0 / cfg.lambda;
    let mut tier = FastTier {
        budget: paging.fast_budget_rows,
        resident: 0,
        stats: TransferStats::default(),
    };
    let mut slow = store.pages;
    let mut q: Vec<f64> = Vec::with_capacity(cfg.m);

    for i in 0..slow.len() {
        let rows_i = slow[i].len() / d;
        // Partial corrections for the gradients of page i, kept in the slow tier.
        let mut buffer = vec![0.0; rows_i * d];
        for j in 0..i {
            let q_base = j * page_rows;
            let rows_j = slow[j].len() / d;
            tier.load_page(rows_j)?;
            let page_j = &slow[j];
            for r in 0..rows_i {
                tier.load_row()?; // gradient g_r
                tier.load_row()?; // buffer row r
                let g = &slow[i][r * d..(r + 1) * d];
                let acc = &mut buffer[r * d..(r + 1) * d];
                accumulate_corrections(
                    page_j.chunks_exact(d).zip(q[q_base..q_base + rows_j].iter().copied()),
                    g,
                    acc,
                );
                tier.release(2);
            }
            tier.release(rows_j);
        }

        // Finish page i in place next to the buffer.
        tier.load_page(rows_i)?;
        tier.load_page(rows_i)?;
        let page = &mut slow[i];
        let mut g = vec![0.0; d];
        for r in 0..rows_i {
            let (done, rest) = page.split_at_mut(r * d);
            let row = &mut rest[..d];
            g.copy_from_slice(row);
            let acc = &mut buffer[r * d..(r + 1) * d];
            let q_base = i * page_rows;
            accumulate_corrections(done.chunks_exact(d).zip(q[q_base..q_base + r].iter().copied()), &g, acc);
            finish_row(inv_lambda, &g, acc);
            row.copy_from_slice(acc);
            let qi = m + dot(row, &g);
            check_denominator(q.len(), qi, m)?;
            q.push(qi);
        }
        tier.release(2 * rows_i);
        tier.stats.page_stores += 1;
    }

    let v: Vec<f64> = slow.into_iter().flatten().collect();
    Ok((StaticSketch { v, q, cfg: cfg.clone() }, tier.stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_gradients;

    #[test]
    fn one_page_is_bit_identical() {
        let g = gaussian_gradients(6, 10, 2).unwrap();
        let cfg = FisherConfig::new(6, 0.01, 10).unwrap();
        let plain = StaticSketch::from_gradients(&g, &cfg).unwrap();
        let store = PagedGradientStore::split(g, 1).unwrap();
        let (paged, stats) = paged_static_setup(store, &cfg, PagingConfig::tight(1, 6)).unwrap();
        assert_eq!(paged, plain);
        assert_eq!(stats.page_loads, 2);
    }

    #[test]
    fn uneven_pages_match_in_memory() {
        let g = gaussian_gradients(10, 7, 4).unwrap();
        let cfg = FisherConfig::new(10, 0.1, 7).unwrap();
        let plain = StaticSketch::from_gradients(&g, &cfg).unwrap();
        let store = PagedGradientStore::split(g, 3).unwrap();
        assert_eq!(store.page_rows(), 4);
        let (paged, stats) = paged_static_setup(store, &cfg, PagingConfig::tight(3, 10)).unwrap();
        assert_eq!(paged, plain);
        // pages 1 and 2 stream 1 and 2 earlier pages, plus 2 finishing loads per page
        assert_eq!(stats.page_loads, 3 + 3 * 2);
        assert!(stats.peak_resident_rows <= PagingConfig::required_budget(4));
    }

    #[test]
    fn small_budget_is_rejected() {
        let g = gaussian_gradients(8, 4, 1).unwrap();
        let cfg = FisherConfig::new(8, 1.0, 4).unwrap();
        let store = PagedGradientStore::split(g, 2).unwrap();
        let paging = PagingConfig {
            pages: 2,
            fast_budget_rows: 3,
        };
        assert!(matches!(paged_static_setup(store, &cfg, paging), Err(MfacError::Config(_))));
    }

    #[test]
    fn inconsistent_pages_are_rejected() {
        assert!(PagedGradientStore::from_pages(3, vec![vec![0.0; 6], vec![0.0; 9]]).is_err());
        assert!(PagedGradientStore::from_pages(3, vec![vec![0.0; 6], vec![0.0; 4]]).is_err());
        assert!(PagedGradientStore::from_pages(3, vec![vec![0.0; 6], vec![0.0; 6], vec![0.0; 3]]).is_ok());
        let g = gaussian_gradients(4, 3, 1).unwrap();
        assert!(PagedGradientStore::split(g, 5).is_err());
    }
}

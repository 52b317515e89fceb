//! Block-diagonal sketches and the two-tier paged setup.

use mfac::static_sketch::{paged_static_setup, PagedGradientStore, PagingConfig};
use mfac::synth::gaussian_gradients;
use mfac::{BlockSize, BlockStaticSketch, FisherConfig, StaticSketch};

fn main() -> mfac::Result<()> {
    let (m, d) = (64, 1024);
    let g = gaussian_gradients(m, d, 3)?;

    let cfg = FisherConfig::new(m, 1e-5, d)?.with_block_size(BlockSize::Width(128))?;
    let blocked = BlockStaticSketch::build(&g, &cfg)?;
    println!("{} blocks of width 128", blocked.blocks().len());
    println!("within block  [F^-1]_(5,6)   = {:.6e}", blocked.element(5, 6)?);
    println!("across blocks [F^-1]_(5,600) = {:.1}", blocked.element(5, 600)?);

    let full_cfg = FisherConfig::new(m, 1e-5, d)?;
    let reference = StaticSketch::from_gradients(&g, &full_cfg)?;
    for pages in [2, 4, 8] {
        let store = PagedGradientStore::split(g.clone(), pages)?;
        let paging = PagingConfig::tight(pages, m);
        let (paged, stats) = paged_static_setup(store, &full_cfg, paging)?;
        let same = paged.v() == reference.v() && paged.q() == reference.q();
        println!(
            "k = {pages}: budget {} rows, peak {} rows, {} page loads, identical to in-memory: {same}",
            paging.fast_budget_rows, stats.peak_resident_rows, stats.page_loads
        );
    }
    Ok(())
}

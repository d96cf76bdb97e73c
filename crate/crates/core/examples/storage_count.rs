//! Counts index entries: one MIEM entry per product against one I2I entry
//! per image.
//!
//! `cargo run --release --example storage_count -- [classes]`

use mmsearch::annindex::HnswConfig;
use mmsearch::lifecycle::{build_index, I2iExtractor, MiemExtractor};
use mmsearch::towers::{PixelEmbedder, TowerConfig, TowerModel};
use mmsearch::trainer::{generate_synthetic_logs, SyntheticCatalogSpec};

fn main() -> mmsearch::Result<()> {
    let classes = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let corpus = generate_synthetic_logs(&SyntheticCatalogSpec {
        classes,
        ..SyntheticCatalogSpec::default()
    })?;
    let cfg = TowerConfig::default();
    let model = TowerModel::new(cfg)?;
    let (miem, _) = build_index(&corpus.catalog, &MiemExtractor::new(&model)?, HnswConfig::new(cfg.out_dim))?;
    let (size, patch) = cfg.grid();
    let pixels = PixelEmbedder::new(size, patch);
    let (i2i, _) = build_index(&corpus.catalog, &I2iExtractor::new(pixels), HnswConfig::new(size * size))?;
    let images: usize = corpus.catalog.iter().map(|r| r.images.len()).sum();
    println!("products {:>6}  MIEM entries {:>6}", corpus.catalog.len(), miem.len());
    println!("images   {images:>6}  I2I entries  {:>6}", i2i.len());
    println!("entry ratio {:.3}", miem.len() as f64 / i2i.len() as f64);
    Ok(())
}

//! Generates a synthetic catalog with click logs, prints its make-up and
//! writes it to a directory.
//!
//! `cargo run --release --example gen_data -- [out_dir] [classes] [items]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use mmsearch::trainer::{generate_synthetic_logs, Relation, SyntheticCatalogSpec, SyntheticCorpus};

fn main() -> mmsearch::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mmsearch-data"));
    let classes = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let items = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let spec = SyntheticCatalogSpec {
        classes,
        items_per_class: items,
        ..SyntheticCatalogSpec::default()
    };
    let corpus = generate_synthetic_logs(&spec)?;

    let images: usize = corpus.catalog.iter().map(|r| r.images.len()).sum();
    let twins = corpus.catalog.len() - {
        let mut items = corpus.truth.latent_item.clone();
        items.sort_unstable();
        items.dedup();
        items.len()
    };
    println!(
        "{} products, {images} images ({:.2}/product), {twins} twin listings",
        corpus.catalog.len(),
        images as f64 / corpus.catalog.len() as f64
    );
    let mut mix: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &corpus.logs {
        let name = match t.relation {
            Relation::Identical => "identical",
            Relation::Similar => "similar",
            Relation::Noise => "noise",
        };
        *mix.entry(name).or_default() += 1;
    }
    for (name, n) in &mix {
        println!("{name:>9}: {n:>5} triplets ({:.2})", *n as f64 / corpus.logs.len() as f64);
    }
    for r in corpus.catalog.iter().take(3) {
        println!("{}  class {:>3}  {} images  \"{}\"", r.product_id, r.category, r.images.len(), r.title);
    }

    corpus.save(&out)?;
    let back = SyntheticCorpus::load(&out)?;
    assert_eq!(back.catalog, corpus.catalog);
    println!("saved to {}", out.display());
    Ok(())
}

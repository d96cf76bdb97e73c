//! Trains the same-item classifier on I2I neighbor pairs and merges twin
//! listings of one physical item.
//!
//! `cargo run --release --example merge_twins -- [twin_fraction]`

use std::collections::HashMap;

use mmsearch::annindex::HnswConfig;
use mmsearch::evalkit::{merge_same_items, probe_pairs, ClassifierTraining, SameItemClassifier};
use mmsearch::lifecycle::{build_index, I2iExtractor};
use mmsearch::towers::PixelEmbedder;
use mmsearch::trainer::{generate_synthetic_logs, SyntheticCatalogSpec};

fn main() -> mmsearch::Result<()> {
    let twins: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let spec = SyntheticCatalogSpec {
        classes: 20,
        twin_fraction: twins,
        ..SyntheticCatalogSpec::default()
    };
    let corpus = generate_synthetic_logs(&spec)?;
    let pos: HashMap<&str, usize> = corpus.catalog.iter().enumerate().map(|(i, r)| (r.product_id.as_str(), i)).collect();
    let latent = |p: &str| corpus.truth.latent_item[pos[p]];
    let same = |a: &str, b: &str| latent(a) == latent(b);

    let (size, patch) = (spec.image_size, spec.patch_size);
    let (index, _) = build_index(&corpus.catalog, &I2iExtractor::new(PixelEmbedder::new(size, patch)), HnswConfig::new(size * size))?;
    let k = 5;
    let pairs = probe_pairs(&index, k, same)?;
    let positives = pairs.iter().filter(|p| p.same).count();
    println!("{} probe pairs, {positives} of the same item", pairs.len());

    let mut clf = SameItemClassifier::new(index.dim(), 32, 0)?;
    let losses = clf.train(&pairs, &ClassifierTraining::default())?;
    println!(
        "classifier loss {:.3} -> {:.3}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );

    let ids: Vec<String> = corpus.catalog.iter().map(|r| r.product_id.clone()).collect();
    let groups = merge_same_items(&ids, &index, &clf, k)?;
    let merged: Vec<&Vec<String>> = groups.groups().iter().filter(|g| g.len() > 1).collect();
    let pure = merged.iter().filter(|g| g.iter().all(|p| same(p, &g[0]))).count();
    let true_twins = ids.iter().filter(|p| ids.iter().any(|q| q != *p && same(p, q))).count();
    println!("{} merged groups, {pure} contain a single item; {true_twins} products have a twin", merged.len());
    for g in merged.iter().take(5) {
        println!("  {}", g.join(" + "));
    }
    Ok(())
}

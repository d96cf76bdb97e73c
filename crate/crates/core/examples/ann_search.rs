//! Builds an HNSW index over random unit vectors and compares its answers
//! with an exact scan.
//!
//! ```text
//! cargo run --release --example ann_search -- [n] [dim]
//! ```

use std::time::Instant;

use mmsearch::annindex::{brute_force_knn, HnswConfig, HnswIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> mmsearch::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let dim: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut sample = |count: usize| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    };
    let data = sample(n);
    let queries = sample(100);

    let t = Instant::now();
    let mut index = HnswIndex::new(HnswConfig::new(dim))?;
    for (i, v) in data.iter().enumerate() {
        index.insert(&format!("v{i:06}"), v)?;
    }
    println!("built {n} x {dim} in {:.2?}", t.elapsed());

    for ef in [16, 32, 64, 128] {
        let t = Instant::now();
        let mut hit = 0;
        for q in &queries {
            let truth: Vec<String> = brute_force_knn(index.live_entries(), q, 10)
                .into_iter()
                .map(|h| h.key)
                .collect();
            hit += index
                .search(q, 10, ef)?
                .iter()
                .filter(|h| truth.contains(&h.key))
                .count();
        }
        println!(
            "ef_search {ef:>4}: recall@10 {:.3} ({:.2?} for {} queries incl. exact scan)",
            hit as f64 / (10 * queries.len()) as f64,
            t.elapsed(),
            queries.len()
        );
    }
    Ok(())
}

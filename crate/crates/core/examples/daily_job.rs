//! Runs the daily index job over a week of simulated catalog churn and
//! checks the incrementally updated index against a scratch build.
//!
//! `cargo run --release --example daily_job -- [days] [churn]`

use chrono::{Days, NaiveDate};
use mmsearch::annindex::{HnswConfig, HnswIndex};
use mmsearch::lifecycle::{
    build_index_from_partition, daily_job, simulate_churn, CatalogSnapshot, DailyOptions, MiemExtractor, PartitionStore,
};
use mmsearch::towers::{TowerConfig, TowerModel};
use mmsearch::trainer::{generate_synthetic_logs, SyntheticCatalogSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmsearch::Result<()> {
    let mut args = std::env::args().skip(1);
    let days: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let churn: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let corpus = generate_synthetic_logs(&SyntheticCatalogSpec {
        classes: 50,
        ..SyntheticCatalogSpec::default()
    })?;
    let cfg = TowerConfig::default();
    let model = TowerModel::new(cfg)?;
    let ex = MiemExtractor::new(&model)?;
    let dir = tempfile::tempdir()?;
    let store = PartitionStore::open(dir.path(), 3)?;
    let hnsw = HnswConfig::new(cfg.out_dim);
    let mut index = HnswIndex::new(hnsw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let start = NaiveDate::from_ymd_opt(2024, 1, 1).expect("date");
    let mut records = corpus.catalog.clone();
    let mut last = None;
    for d in 0..=days {
        let day = start + Days::new(d);
        if d > 0 {
            records = simulate_churn(&records, churn, &mut rng, &format!("d{d}"));
        }
        let snap = CatalogSnapshot::new(day, records.clone())?;
        let out = daily_job(&store, &snap, &ex, &mut index, "miem", DailyOptions { bootstrap: d == 0 })?;
        let r = &out.report;
        println!(
            "{}: copied {:>4} embedded {:>4} deleted {:>3} updated {:>4} ({} ms), index {} live",
            r.day,
            r.copied,
            r.embedded,
            r.deleted,
            r.updated,
            r.duration_ms,
            index.len()
        );
        last = Some(out);
    }
    let kept: Vec<String> = store.days()?.iter().map(|d| d.to_string()).collect();
    println!("partitions kept: {}", kept.join(", "));

    let out = last.expect("at least one day");
    let scratch = build_index_from_partition(&out.partition, hnsw)?;
    let probes: Vec<Vec<f64>> = out.partition.entries.values().take(50).map(|r| r.embedding.clone()).collect();
    let mut same = 0;
    for q in &probes {
        let a = index.search(q, 10, index.len())?;
        let b = scratch.search(q, 10, scratch.len())?;
        same += usize::from(a == b);
    }
    println!("{same}/{} probes match a scratch build of the last partition", probes.len());
    Ok(())
}

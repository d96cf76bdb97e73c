//! Trains the three-stage curriculum on the default synthetic corpus and
//! prints the offline comparison of I2I, MIEM and their fusion.
//!
//! `cargo run --release --example offline_eval -- [epochs1 epochs2 epochs3]`

use std::time::Instant;

use mmsearch::annindex::HnswConfig;
use mmsearch::evalkit::{run_offline_eval, synthetic_eval_queries, EvalIndexes, EvalOptions};
use mmsearch::towers::{TowerConfig, TowerModel};
use mmsearch::trainer::{generate_synthetic_logs, train_stage, SyntheticCatalogSpec, TrainConfig};

fn main() -> mmsearch::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let corpus = generate_synthetic_logs(&SyntheticCatalogSpec::default())?;
    let mut model = TowerModel::new(TowerConfig::default())?;
    for stage in 1u8..=3 {
        let t = Instant::now();
        let mut cfg = TrainConfig::for_stage(stage);
        if let Some(n) = args.get(usize::from(stage) - 1) {
            cfg.epochs = *n;
        }
        let n = cfg.epochs;
        let curve = train_stage(&mut model, &corpus.logs, &cfg)?;
        let (head, tail) = curve.head_tail_means(50);
        println!("stage {stage}: {n} epochs, loss {head:.3} -> {tail:.3} in {:.0?}", t.elapsed());
    }
    let t = Instant::now();
    let hnsw = HnswConfig {
        ef_construction: 100,
        ..HnswConfig::new(1)
    };
    let indexes = EvalIndexes::build(&model, &corpus.catalog, true, hnsw)?;
    let queries = synthetic_eval_queries(&corpus, 1, 7)?;
    let opts = EvalOptions {
        weight_grid: vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
        ..EvalOptions::default()
    };
    let report = run_offline_eval(&model, &indexes, &queries, &opts)?;
    println!("eval in {:.0?}\n", t.elapsed());
    print!("{}", report.to_text());
    Ok(())
}

//! Runs the three training stages on a small corpus, prints each loss
//! curve and round-trips the checkpoint.
//!
//! `cargo run --release --example train_curriculum -- [classes] [epochs]`

use std::time::Instant;

use mmsearch::towers::{checkpoint, TowerConfig, TowerModel};
use mmsearch::trainer::{generate_synthetic_logs, train_stage, SyntheticCatalogSpec, TrainConfig};

fn main() -> mmsearch::Result<()> {
    let mut args = std::env::args().skip(1);
    let classes = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let epochs: Option<usize> = args.next().and_then(|s| s.parse().ok());
    let corpus = generate_synthetic_logs(&SyntheticCatalogSpec {
        classes,
        ..SyntheticCatalogSpec::default()
    })?;
    println!("{} triplets over {} products", corpus.logs.len(), corpus.catalog.len());

    let mut model = TowerModel::new(TowerConfig::default())?;
    for stage in 1u8..=3 {
        let mut cfg = TrainConfig::for_stage(stage);
        cfg.epochs = epochs.unwrap_or(cfg.epochs / 4).max(1);
        let t = Instant::now();
        let curve = train_stage(&mut model, &corpus.logs, &cfg)?;
        let losses = curve.losses();
        let per_epoch = losses.len() / cfg.epochs;
        let marks: Vec<String> = losses
            .chunks(per_epoch.max(1))
            .map(|c| format!("{:.2}", c.iter().sum::<f64>() / c.len() as f64))
            .collect();
        println!("stage {stage} ({} epochs, {:.1?}): {}", cfg.epochs, t.elapsed(), marks.join(" "));
    }

    let path = std::env::temp_dir().join("mmsearch-example.ckpt");
    checkpoint::save(&model, &path)?;
    let back = checkpoint::load(&path)?;
    println!(
        "checkpoint {} ({} -> {}), trained through stage {}",
        path.display(),
        checkpoint::fingerprint(&model),
        checkpoint::fingerprint(&back),
        back.trained_stage()
    );
    Ok(())
}

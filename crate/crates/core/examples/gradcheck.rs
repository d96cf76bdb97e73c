//! Checks every loss gradient against central differences over a range of
//! random sizes, scales and margins.
//!
//! `cargo run --release --example gradcheck -- [seeds]`

use mmsearch::trainer::{loss_grad_suite, GRAD_SUITE};

fn main() -> mmsearch::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut worst = [0.0f64; GRAD_SUITE.len()];
    let mut coords = [0usize; GRAD_SUITE.len()];
    for seed in 0..seeds {
        for (i, (_, r)) in loss_grad_suite(seed)?.into_iter().enumerate() {
            worst[i] = worst[i].max(r.max_rel_error);
            coords[i] += r.checked;
        }
    }
    for (i, name) in GRAD_SUITE.iter().enumerate() {
        println!("{name:<22} worst relative error {:.2e} over {} coordinates", worst[i], coords[i]);
    }
    Ok(())
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{generate_synthetic_logs, ClickLogTriplet, SyntheticCatalogSpec};
use super::train::{stage_grad_check, TrainConfig};
use crate::error::Result;
use crate::losses::{am_info_nce_on, info_nce_on, modality_balance_loss, FusedViews, LossConfig, XbmBuffer, XbmSide};
use crate::numcore::{grad_check, GradCheckReport, Tensor};
use crate::towers::{TowerConfig, TowerModel};

/// Names of the checks run by [`loss_grad_suite`], in order.
pub const GRAD_SUITE: [&str; 4] = ["info_nce", "am_info_nce", "modality_balance_loss", "final_loss"];

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Central-difference checks of every loss at one random size, margin and
/// scale drawn from `seed`. `final_loss` runs through a small tower model
/// on a stage-2 batch with a non-empty cross-batch memory.
pub fn loss_grad_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let d = rng.random_range(2..=16);
    let cfg = LossConfig {
        gamma: rng.random_range(1.0..20.0),
        margin: rng.random_range(0.0..0.3),
        ..LossConfig::default()
    };
    let eps = 1e-6;
    let a = unit_rows(&mut rng, n, d)?;
    let b = unit_rows(&mut rng, n, d)?;
    let mut out = Vec::with_capacity(GRAD_SUITE.len());

    let bc = b.clone();
    out.push((
        GRAD_SUITE[0],
        grad_check(move |t, x| {
            let c = t.constant(bc.clone());
            info_nce_on(t, x, c)
        }, &a, eps)?,
    ));
    let ac = a.clone();
    out.push((
        GRAD_SUITE[1],
        grad_check(move |t, x| {
            let q = t.constant(ac.clone());
            am_info_nce_on(t, q, x, &cfg)
        }, &b, eps)?,
    ));
    let stacked = unit_rows(&mut rng, 3 * n, d)?;
    let (qi, ii, ti): (Vec<usize>, Vec<usize>, Vec<usize>) = ((0..n).collect(), (n..2 * n).collect(), (2 * n..3 * n).collect());
    out.push((
        GRAD_SUITE[2],
        grad_check(move |t, x| {
            let q = t.gather_rows(x, &qi)?;
            let views = FusedViews {
                full: q,
                no_image: t.gather_rows(x, &ii)?,
                no_title: t.gather_rows(x, &ti)?,
            };
            modality_balance_loss(t, q, &views, &cfg)
        }, &stacked, eps)?,
    ));

    let spec = SyntheticCatalogSpec {
        classes: 2,
        items_per_class: 4,
        images_per_item: (1, 3),
        vocab_size: 64,
        seed,
        twin_fraction: 0.0,
        image_size: 8,
        patch_size: 4,
        max_title_len: 8,
        ..SyntheticCatalogSpec::default()
    };
    let corpus = generate_synthetic_logs(&spec)?;
    let model = TowerModel::new(TowerConfig {
        image_size: 8,
        patch_size: 4,
        token_dim: 16,
        heads: 2,
        vocab_size: 64,
        max_title_len: 8,
        out_dim: 16,
        k_images: 3,
        seed,
        ..TowerConfig::default()
    })?;
    let batch: Vec<&ClickLogTriplet> = corpus.logs.iter().take(n.min(corpus.logs.len())).collect();
    let mut xbm = XbmBuffer::new(16);
    let old: Vec<Vec<f64>> = unit_rows(&mut rng, 3, 16)?.to_rows();
    xbm.push_and_negatives(&old, &[90, 91, 92], XbmSide::Fusion)?;
    xbm.push_and_negatives(&old, &[90, 91, 92], XbmSide::Query)?;
    let train = TrainConfig {
        k: 3,
        loss: LossConfig { xbm_capacity: 16, ..cfg },
        ..TrainConfig::for_stage(2)
    };
    out.push((GRAD_SUITE[3], stage_grad_check(&model, &batch, &xbm, &train, 2, eps)?));
    Ok(out)
}

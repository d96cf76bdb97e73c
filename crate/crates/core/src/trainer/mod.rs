//! Synthetic click logs and the three-stage training curriculum.
//!
//! Stage 1 aligns query embeddings with projected title embeddings; the
//! fusion module is not involved. Stage 2 trains the full item tower on the
//! first clicked image of each triplet with the composite loss, class-based
//! batches and cross-batch memory. Stage 3 repeats stage 2 with up to `K`
//! clicked images per item.

mod adamw;
mod suite;
mod synth;
mod train;

pub use adamw::{adamw_step, adamw_step_store, AdamWConfig, AdamWState};
pub use suite::{loss_grad_suite, GRAD_SUITE};
pub use synth::{
    generate_synthetic_logs, render_heldout_views, ClickLogTriplet, GroundTruth, HeldOutView, ImageStyle, Relation,
    SyntheticCatalogSpec, SyntheticCorpus,
};
pub use train::{stage_grad_check, stage_loss, train_stage, LossCurve, LossPoint, TrainConfig};

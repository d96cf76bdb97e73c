//! The dual-tower model.
//!
//! The query tower embeds a single image: patch tokens from the image
//! encoder, mean-pooled and projected. The item tower encodes a title and up
//! to `K` images, concatenates `[CLS + title tokens, patches of every image]`
//! and runs merge attention over the union; the CLS output goes through the
//! fusion projection. Both towers read the same image encoder weights.
//!
//! A padded image slot is excluded from the fused sequence entirely, so its
//! pixels can never reach the output.
//!
//! [`PixelEmbedder`] is the separate image-to-image model used for
//! per-image recall.

pub mod checkpoint;
mod i2i;
mod input;
mod model;

pub use i2i::PixelEmbedder;
pub use input::{pad_or_truncate, ImagePatchGrid, ItemInput, TitleTokens, Vocab, PAD_ID, UNK_ID};
pub use model::{Embedding, FusionModule, ImageEncoder, ItemTower, QueryTower, TitleEncoder, TowerConfig, TowerModel};

#[cfg(test)]
mod tests;

//! Multimodal item embeddings for image search.
//!
//! A query tower embeds a query image; an item tower fuses a product title
//! with up to `K` product images through merge attention. Both towers share
//! one image encoder and are trained with a three-stage contrastive
//! curriculum. Serving combines image-to-image recall with multimodal recall
//! over two HNSW indexes, and a day-partitioned feature store keeps the
//! multimodal index in sync with the catalog.

pub mod annindex;
pub mod catalog;
pub mod cli;
pub mod engine;
pub mod evalkit;
pub mod error;
pub mod lifecycle;
pub mod losses;
pub mod numcore;
pub mod towers;
pub mod trainer;

pub use error::{Error, Result};

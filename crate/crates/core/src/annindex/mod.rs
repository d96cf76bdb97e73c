//! Approximate nearest-neighbor search.
//!
//! [`HnswIndex`] is a hierarchical navigable small-world graph with
//! tombstoned deletes and threshold-triggered rebuilds. [`brute_force_knn`]
//! is the exact reference it is tested against.

mod hnsw;
mod shared;
pub mod snapshot;

pub(crate) use hnsw::normalized;
pub use hnsw::{brute_force_knn, rank_order, HnswConfig, HnswIndex, SearchHit};
pub use shared::SharedIndex;

#[cfg(test)]
mod tests;

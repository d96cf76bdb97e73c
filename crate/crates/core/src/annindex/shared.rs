use std::sync::{Arc, Mutex, RwLock};

use super::hnsw::HnswIndex;
use crate::error::Result;

/// An index shared between many readers and one writer at a time.
///
/// Writers mutate a private copy and publish it with a pointer swap, so a
/// reader holding an `Arc` keeps a consistent graph for as long as it
/// needs, and never sees a half-applied update or rebuild.
#[derive(Debug)]
pub struct SharedIndex {
    current: RwLock<Arc<HnswIndex>>,
    writer: Mutex<()>,
}

impl SharedIndex {
    pub fn new(index: HnswIndex) -> Self {
        Self {
            current: RwLock::new(Arc::new(index)),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<HnswIndex> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Applies `f` to a copy of the current index and publishes the result
    /// if `f` succeeds. On error the published index is unchanged.
    pub fn update<T>(&self, f: impl FnOnce(&mut HnswIndex) -> Result<T>) -> Result<T> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        self.replace(next);
        Ok(out)
    }

    /// Publishes `index`, e.g. one rebuilt elsewhere.
    pub fn replace(&self, index: HnswIndex) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(index);
    }
}

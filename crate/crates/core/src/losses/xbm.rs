use std::collections::VecDeque;

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum XbmSide {
    Query,
    Fusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XbmEntry {
    pub embedding: Vec<f64>,
    pub class_id: u32,
    pub side: XbmSide,
}

/// Cross-batch memory: one FIFO lane per side, each holding at most
/// `capacity` past embeddings. Entries are constants to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct XbmBuffer {
    capacity: usize,
    query: VecDeque<XbmEntry>,
    fusion: VecDeque<XbmEntry>,
}

impl XbmBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            query: VecDeque::with_capacity(capacity),
            fusion: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, side: XbmSide) -> usize {
        self.lane(side).len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty() && self.fusion.is_empty()
    }

    pub fn clear(&mut self) {
        self.query.clear();
        self.fusion.clear();
    }

    fn lane(&self, side: XbmSide) -> &VecDeque<XbmEntry> {
        match side {
            XbmSide::Query => &self.query,
            XbmSide::Fusion => &self.fusion,
        }
    }

    /// Oldest first.
    pub fn entries(&self, side: XbmSide) -> impl Iterator<Item = &XbmEntry> {
        self.lane(side).iter()
    }

    /// Embeddings currently held on `side`, oldest first.
    pub fn negatives(&self, side: XbmSide) -> Vec<Vec<f64>> {
        self.lane(side).iter().map(|e| e.embedding.clone()).collect()
    }

    /// Returns the lane's current contents, then enqueues the new entries,
    /// evicting the oldest beyond capacity.
    pub fn push_and_negatives(
        &mut self,
        embeddings: &[Vec<f64>],
        class_ids: &[u32],
        side: XbmSide,
    ) -> Result<Vec<Vec<f64>>> {
        if embeddings.len() != class_ids.len() {
            return Err(shape_err!(
                "{} embeddings with {} labels",
                embeddings.len(),
                class_ids.len()
            ));
        }
        let current = self.negatives(side);
        if self.capacity == 0 {
            return Ok(current);
        }
        let cap = self.capacity;
        let lane = match side {
            XbmSide::Query => &mut self.query,
            XbmSide::Fusion => &mut self.fusion,
        };
        for (e, c) in embeddings.iter().zip(class_ids) {
            if lane.len() == cap {
                lane.pop_front();
            }
            lane.push_back(XbmEntry {
                embedding: e.clone(),
                class_id: *c,
                side,
            });
        }
        Ok(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(x: f64) -> Vec<f64> {
        vec![x]
    }

    #[test]
    fn zero_capacity_never_holds_anything() {
        let mut b = XbmBuffer::new(0);
        for i in 0..3 {
            let neg = b.push_and_negatives(&[e(i as f64)], &[0], XbmSide::Query).unwrap();
            assert!(neg.is_empty());
        }
        assert!(b.is_empty());
    }

    #[test]
    fn fifo_keeps_the_latest_entries() {
        let mut b = XbmBuffer::new(2);
        b.push_and_negatives(&[e(1.0), e(2.0), e(3.0)], &[1, 2, 3], XbmSide::Fusion)
            .unwrap();
        assert_eq!(b.negatives(XbmSide::Fusion), vec![e(2.0), e(3.0)]);
        assert_eq!(b.len(XbmSide::Query), 0);
    }

    #[test]
    fn negatives_are_read_before_the_push() {
        let mut b = XbmBuffer::new(4);
        let first = b.push_and_negatives(&[e(1.0)], &[0], XbmSide::Query).unwrap();
        assert!(first.is_empty());
        let second = b.push_and_negatives(&[e(2.0)], &[0], XbmSide::Query).unwrap();
        assert_eq!(second, vec![e(1.0)]);
    }
}

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{domain_err, Result};

/// One minibatch of dataset indices. `filler[j]` marks members drawn from a
/// different class to top up a short class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassBatch {
    pub indices: Vec<usize>,
    pub filler: Vec<bool>,
    pub class_id: u32,
}

impl ClassBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn has_filler(&self) -> bool {
        self.filler.iter().any(|f| *f)
    }
}

/// Splits a labelled dataset into single-class minibatches for one epoch.
///
/// Each class is shuffled and cut into `batch_size` chunks. A short trailing
/// chunk is topped up from a uniformly chosen other class: unused leftovers of
/// other short chunks are consumed first, so every item is used at most once;
/// only when no leftovers remain are fillers drawn (with reuse) from that
/// class's full item list. A dataset with a single class yields a short
/// final batch.
pub fn class_based_batches<R: Rng>(labels: &[u32], batch_size: usize, rng: &mut R) -> Result<Vec<ClassBatch>> {
    if labels.is_empty() {
        return Err(domain_err!("empty dataset"));
    }
    if batch_size < 2 {
        return Err(domain_err!("batch_size must be >= 2, got {batch_size}"));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, c) in labels.iter().enumerate() {
        by_class.entry(*c).or_default().push(i);
    }
    let mut classes: Vec<(u32, Vec<usize>)> = by_class.into_iter().collect();
    for (_, items) in classes.iter_mut() {
        items.shuffle(rng);
    }
    classes.shuffle(rng);

    let mut batches = Vec::new();
    // (class, leftover items) per class with a short tail, in class order.
    let mut leftovers: Vec<(u32, Vec<usize>)> = Vec::new();
    for (class, items) in &classes {
        let full = items.len() / batch_size;
        for chunk in items.chunks(batch_size).take(full) {
            batches.push(ClassBatch {
                indices: chunk.to_vec(),
                filler: vec![false; batch_size],
                class_id: *class,
            });
        }
        let rest = &items[full * batch_size..];
        if !rest.is_empty() {
            leftovers.push((*class, rest.to_vec()));
        }
    }

    for slot in 0..leftovers.len() {
        let (class, primary) = {
            let (c, items) = &mut leftovers[slot];
            (*c, std::mem::take(items))
        };
        if primary.is_empty() {
            continue;
        }
        let mut indices = primary.clone();
        let mut filler = vec![false; primary.len()];
        while indices.len() < batch_size {
            let donors: Vec<usize> = leftovers
                .iter()
                .enumerate()
                .filter(|(_, (c, items))| *c != class && !items.is_empty())
                .map(|(i, _)| i)
                .collect();
            if let Some(&d) = donors.get(rng.random_range(0..donors.len().max(1))) {
                let need = batch_size - indices.len();
                let items = &mut leftovers[d].1;
                let take = need.min(items.len());
                for idx in items.drain(..take) {
                    indices.push(idx);
                    filler.push(true);
                }
                continue;
            }
            let others: Vec<&(u32, Vec<usize>)> = classes.iter().filter(|(c, _)| *c != class).collect();
            if others.is_empty() {
                break;
            }
            let (_, items) = others[rng.random_range(0..others.len())];
            let need = batch_size - indices.len();
            let mut pool = items.clone();
            pool.shuffle(rng);
            for idx in pool.into_iter().take(need) {
                indices.push(idx);
                filler.push(true);
            }
        }
        batches.push(ClassBatch {
            indices,
            filler,
            class_id: class,
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn two_full_classes_make_two_pure_batches() {
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = class_based_batches(&labels, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert!(!b.has_filler());
            assert!(b.indices.iter().all(|i| labels[*i] == b.class_id));
        }
    }

    #[test]
    fn short_class_gets_one_flagged_filler() {
        // class 7 has 3 items, class 9 has 4: the short class borrows one.
        let labels = [7, 9, 7, 9, 9, 7, 9];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batches = class_based_batches(&labels, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 2);
        let short = batches.iter().find(|b| b.class_id == 7).unwrap();
        assert_eq!(short.len(), 4);
        assert_eq!(short.filler, vec![false, false, false, true]);
        assert_eq!(labels[short.indices[3]], 9);
        assert!(short.indices[..3].iter().all(|i| labels[*i] == 7));
    }

    #[test]
    fn same_seed_same_batches() {
        let labels: Vec<u32> = (0..50).map(|i| (i % 7) as u32).collect();
        let a = class_based_batches(&labels, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = class_based_batches(&labels, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_item_is_a_primary_at_most_once() {
        let labels: Vec<u32> = (0..30).map(|i| (i % 4) as u32).collect();
        let batches = class_based_batches(&labels, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut primary = vec![0; labels.len()];
        let mut any = vec![0; labels.len()];
        for b in &batches {
            assert_eq!(b.len(), 4);
            for (i, f) in b.indices.iter().zip(&b.filler) {
                any[*i] += 1;
                if !f {
                    primary[*i] += 1;
                    assert_eq!(labels[*i], b.class_id);
                }
            }
        }
        assert!(primary.iter().all(|c| *c <= 1), "{primary:?}");
        assert!(any.iter().all(|c| *c >= 1));
    }

    #[test]
    fn rejects_empty_and_tiny_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(class_based_batches(&[], 4, &mut rng).is_err());
        assert!(class_based_batches(&[1, 2], 1, &mut rng).is_err());
    }
}

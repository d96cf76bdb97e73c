use std::collections::{BTreeSet, HashMap};

use crate::catalog::Catalog;
use crate::error::{domain_err, Result};

/// Cutoffs reported for every model, in column order.
pub const RECALL_KS: [usize; 5] = [1, 5, 10, 50, 100];

/// Results considered by [`category_accuracy`].
pub const CATEGORY_TOP: usize = 10;

/// Whether any of the first `k` results is a true same item.
pub fn recall_at_k<S: AsRef<str>>(results: &[S], truth: &BTreeSet<String>, k: usize) -> Result<bool> {
    if truth.is_empty() {
        return Err(domain_err!("empty truth set"));
    }
    if k == 0 {
        return Err(domain_err!("k must be at least 1"));
    }
    Ok(results.iter().take(k).any(|r| truth.contains(r.as_ref())))
}

/// Most frequent category; among tied categories, the one that shows up
/// first in `categories`.
pub fn modal_category(categories: &[u32]) -> Option<u32> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for c in categories {
        *counts.entry(*c).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    categories.iter().copied().find(|c| counts[c] == best)
}

/// Whether the modal category of the top [`CATEGORY_TOP`] results is
/// `truth_category`.
pub fn category_accuracy<S: AsRef<str>>(results: &[S], catalog: &Catalog, truth_category: u32) -> Result<bool> {
    if results.is_empty() {
        return Err(domain_err!("category accuracy needs at least one result"));
    }
    let cats: Vec<u32> = results
        .iter()
        .take(CATEGORY_TOP)
        .map(|r| catalog.category(r.as_ref()))
        .collect::<Result<_>>()?;
    Ok(modal_category(&cats) == Some(truth_category))
}

/// Fraction of `true` values; 0 for an empty input.
pub fn mean_hits(hits: impl IntoIterator<Item = bool>) -> f64 {
    let (mut n, mut h) = (0usize, 0usize);
    for x in hits {
        n += 1;
        h += usize::from(x);
    }
    if n == 0 {
        0.0
    } else {
        h as f64 / n as f64
    }
}

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::catalog::ProductRecord;

/// One simulated day of catalog churn: about `fraction / 3` of `records`
/// each are removed, retitled, and relisted as new products with ids
/// `{tag}-0000`, `{tag}-0001`, ...
pub fn simulate_churn<R: Rng + ?Sized>(records: &[ProductRecord], fraction: f64, rng: &mut R, tag: &str) -> Vec<ProductRecord> {
    let n = (((records.len() as f64 * fraction) / 3.0).round() as usize).min(records.len() / 3);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(rng);
    let removed: BTreeSet<usize> = order[..n].iter().copied().collect();
    let edited: BTreeSet<usize> = order[n..2 * n].iter().copied().collect();
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if removed.contains(&i) {
            continue;
        }
        let mut r = r.clone();
        if edited.contains(&i) {
            r.title.push_str(" w0009");
        }
        out.push(r);
    }
    for j in 0..n {
        let mut r = records[order[2 * n + j]].clone();
        r.product_id = format!("{tag}-{j:04}");
        r.title = format!("w0010 {}", r.title);
        out.push(r);
    }
    out
}

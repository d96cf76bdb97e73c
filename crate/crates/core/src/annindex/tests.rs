use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::Error;

fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn key(i: usize) -> String {
    format!("k{i:04}")
}

fn build(vectors: &[Vec<f64>], cfg: HnswConfig) -> HnswIndex {
    let mut idx = HnswIndex::new(cfg).unwrap();
    for (i, v) in vectors.iter().enumerate() {
        idx.insert(&key(i), v).unwrap();
    }
    idx
}

fn keys_of(hits: &[SearchHit]) -> Vec<String> {
    hits.iter().map(|h| h.key.clone()).collect()
}

fn recall_vs_oracle(idx: &HnswIndex, queries: &[Vec<f64>], k: usize, ef: usize) -> f64 {
    let mut found = 0;
    for q in queries {
        let truth = keys_of(&brute_force_knn(idx.live_entries(), q, k));
        let got = keys_of(&idx.search(q, k, ef).unwrap());
        found += got.iter().filter(|g| truth.contains(g)).count();
    }
    found as f64 / (k * queries.len()) as f64
}

#[test]
fn first_insert_becomes_entry_point() {
    let mut idx = HnswIndex::new(HnswConfig::new(3)).unwrap();
    assert!(idx.search(&[1.0, 0.0, 0.0], 1, 1).unwrap().is_empty());
    idx.insert("a", &[0.0, 2.0, 0.0]).unwrap();
    assert_eq!(idx.entry, Some(0));
    let hits = idx.search(&[0.0, 1.0, 0.0], 1, 1).unwrap();
    assert_eq!(hits[0].key, "a");
    assert!((hits[0].score - 1.0).abs() < 1e-12);
}

#[test]
fn every_vector_finds_itself() {
    let data = random_vectors(100, 16, 1);
    let idx = build(&data, HnswConfig::new(16));
    for (i, v) in data.iter().enumerate() {
        let hits = idx.search(v, 1, 100).unwrap();
        assert_eq!(hits[0].key, key(i));
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }
    idx.check_invariants().unwrap();
}

#[test]
fn insert_errors() {
    let mut idx = HnswIndex::new(HnswConfig::new(2)).unwrap();
    idx.insert("a", &[1.0, 0.0]).unwrap();
    assert!(matches!(idx.insert("a", &[0.0, 1.0]), Err(Error::Conflict(_))));
    assert!(matches!(idx.insert("b", &[1.0]), Err(Error::Shape(_))));
    assert!(matches!(idx.insert("c", &[0.0, 0.0]), Err(Error::Domain(_))));
    assert!(matches!(idx.search(&[1.0, 0.0], 2, 1), Err(Error::Domain(_))));
    assert!(matches!(idx.search(&[1.0, 0.0], 0, 1), Err(Error::Domain(_))));
}

#[test]
fn reinserted_key_uses_its_new_vector() {
    let data = random_vectors(200, 8, 2);
    let mut cfg = HnswConfig::new(8);
    cfg.rebuild_ratio = None;
    let mut idx = build(&data, cfg);
    idx.delete(&key(7)).unwrap();
    let moved: Vec<f64> = data[150].iter().map(|x| x + 1e-3).collect();
    idx.insert(&key(7), &moved).unwrap();
    let hits = idx.search(&data[150], 2, 50).unwrap();
    assert_eq!(keys_of(&hits), keys_of(&brute_force_knn(idx.live_entries(), &data[150], 2)));
    assert!(keys_of(&hits).contains(&key(7)));
    assert!(!keys_of(&idx.search(&data[7], 5, 50).unwrap()).contains(&key(7)));
    idx.check_invariants().unwrap();
}

#[test]
fn deleted_keys_disappear() {
    let mut idx = HnswIndex::new(HnswConfig::new(2)).unwrap();
    idx.insert("a", &[1.0, 0.0]).unwrap();
    idx.insert("b", &[0.0, 1.0]).unwrap();
    idx.delete("a").unwrap();
    assert_eq!(keys_of(&idx.search(&[1.0, 0.0], 2, 2).unwrap()), ["b"]);
    idx.delete("b").unwrap();
    assert!(idx.search(&[1.0, 0.0], 2, 2).unwrap().is_empty());
    assert!(matches!(idx.delete("b"), Err(Error::NotFound(_))));
}

#[test]
fn recall_survives_thirty_percent_tombstones() {
    let data = random_vectors(1000, 16, 3);
    let mut cfg = HnswConfig::new(16);
    cfg.rebuild_ratio = None;
    let mut idx = build(&data, cfg);
    for i in (0..1000).filter(|i| i % 10 < 3) {
        idx.delete(&key(i)).unwrap();
    }
    assert_eq!(idx.tombstones(), 300);
    let queries = random_vectors(50, 16, 4);
    let r = recall_vs_oracle(&idx, &queries, 10, 64);
    assert!(r >= 0.95, "recall {r}");
}

#[test]
fn deletes_trigger_rebuild_past_the_ratio() {
    let data = random_vectors(100, 8, 5);
    let mut idx = build(&data, HnswConfig::new(8));
    for i in 0..16 {
        idx.delete(&key(i)).unwrap();
    }
    assert_eq!(idx.tombstones(), 16);
    idx.delete(&key(16)).unwrap();
    assert_eq!(idx.tombstones(), 0);
    assert_eq!(idx.node_count(), 83);
    idx.check_invariants().unwrap();
}

#[test]
fn wide_beam_is_exact() {
    let data = random_vectors(300, 12, 6);
    let mut cfg = HnswConfig::new(12);
    cfg.rebuild_ratio = None;
    let mut idx = build(&data, cfg);
    for i in (0..300).step_by(4) {
        idx.delete(&key(i)).unwrap();
    }
    for q in random_vectors(20, 12, 7) {
        let exact = brute_force_knn(idx.live_entries(), &q, 10);
        let got = idx.search(&q, 10, idx.len()).unwrap();
        assert_eq!(keys_of(&got), keys_of(&exact));
        for (a, b) in got.iter().zip(&exact) {
            assert!((a.score - b.score).abs() < 1e-12);
        }
    }
}

#[test]
fn large_k_returns_every_live_key() {
    let data = random_vectors(20, 4, 8);
    let mut idx = build(&data, HnswConfig::new(4));
    idx.delete(&key(3)).unwrap();
    let hits = idx.search(&data[0], 50, 50).unwrap();
    assert_eq!(hits.len(), 19);
    assert!(hits.windows(2).all(|w| rank_order(&w[0], &w[1]).is_lt()));
}

#[test]
fn rebuild_without_tombstones_keeps_results() {
    let data = random_vectors(500, 16, 9);
    let idx = build(&data, HnswConfig::new(16));
    let fresh = idx.rebuild();
    assert_eq!(fresh, idx);
    for q in random_vectors(20, 16, 10) {
        assert_eq!(idx.search(&q, 10, 64).unwrap(), fresh.search(&q, 10, 64).unwrap());
    }
    let empty = HnswIndex::new(HnswConfig::new(4)).unwrap().rebuild();
    assert!(empty.is_empty() && empty.node_count() == 0);
}

#[test]
fn rebuild_restores_recall_after_heavy_deletion() {
    let data = random_vectors(2000, 16, 11);
    let queries = random_vectors(50, 16, 12);
    let mut cfg = HnswConfig::new(16);
    cfg.rebuild_ratio = None;
    let mut idx = build(&data, cfg);
    let before = recall_vs_oracle(&idx, &queries, 10, 32);
    for i in (0..2000).step_by(2) {
        idx.delete(&key(i)).unwrap();
    }
    let fresh = idx.rebuild();
    assert_eq!(fresh.tombstones(), 0);
    assert_eq!(fresh.len(), 1000);
    fresh.check_invariants().unwrap();
    let after = recall_vs_oracle(&fresh, &queries, 10, 32);
    assert!(after >= before, "{before} -> {after}");
}

#[test]
fn brute_force_basics() {
    let one = [("x", &[3.0, 4.0][..])];
    let hits = brute_force_knn(one, &[3.0, 4.0], 5);
    assert_eq!(hits.len(), 1);
    assert!((hits[0].score - 1.0).abs() < 1e-15);
    let store = [("c", &[0.0, 1.0][..]), ("a", &[0.0, 2.0][..]), ("b", &[0.0, -1.0][..])];
    let hits = brute_force_knn(store, &[1.0, 0.0], 2);
    assert_eq!(keys_of(&hits), ["a", "b"]);
    assert!(hits.iter().all(|h| h.score == 0.0));
}

#[test]
fn brute_force_matches_an_independent_scan() {
    let data: Vec<Vec<f64>> = (0..1000)
        .map(|i| (0..32).map(|j| (((i + 1) * (j + 1)) as f64 * 0.37 + i as f64 * 0.11).sin()).collect())
        .collect();
    let keys: Vec<String> = (0..1000).map(key).collect();
    let expected: [([usize; 10], f64); 3] = [
        ([133, 1, 82, 918, 184, 969, 867, 697, 52, 999], 0.990_849_225_972_368_7),
        ([982, 765, 14, 65, 816, 714, 931, 116, 69, 286], 0.990_007_022_718_084_5),
        ([884, 833, 167, 218, 914, 863, 935, 782, 116, 965], 0.973_376_013_175_754_6),
    ];
    for (t, (want, top)) in expected.iter().enumerate() {
        let q: Vec<f64> = (0..32).map(|j| (t as f64 * 1.3 + j as f64 * 0.7).cos()).collect();
        let store = keys.iter().map(String::as_str).zip(data.iter().map(Vec::as_slice));
        let hits = brute_force_knn(store, &q, 10);
        assert_eq!(keys_of(&hits), want.iter().map(|i| key(*i)).collect::<Vec<_>>());
        assert!((hits[0].score - top).abs() < 1e-12);
    }
}

#[test]
fn same_operations_give_the_same_graph() {
    let data = random_vectors(300, 8, 13);
    let run = || {
        let mut idx = build(&data, HnswConfig::new(8));
        for i in (0..300).step_by(7) {
            idx.delete(&key(i)).unwrap();
        }
        snapshot::to_bytes(&idx)
    };
    assert_eq!(run(), run());
}

#[test]
fn snapshot_round_trip_is_bit_exact() {
    let data = random_vectors(200, 8, 14);
    let mut cfg = HnswConfig::new(8);
    cfg.rebuild_ratio = None;
    let mut idx = build(&data, cfg);
    for i in (0..200).step_by(3) {
        idx.delete(&key(i)).unwrap();
    }
    let bytes = snapshot::to_bytes(&idx);
    let back = snapshot::from_bytes(&bytes).unwrap();
    assert_eq!(back, idx);
    assert_eq!(snapshot::to_bytes(&back), bytes);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("miem.hnsw");
    snapshot::save(&idx, &path).unwrap();
    assert_eq!(snapshot::load(&path).unwrap(), idx);

    assert!(snapshot::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(snapshot::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(snapshot::from_bytes(&magic), Err(Error::Format(_))));
}

#[test]
fn shared_index_publishes_whole_updates() {
    let shared = SharedIndex::new(HnswIndex::new(HnswConfig::new(2)).unwrap());
    shared.update(|idx| idx.insert("a", &[1.0, 0.0])).unwrap();
    let held = shared.snapshot();
    shared.update(|idx| idx.insert("b", &[0.0, 1.0])).unwrap();
    assert_eq!(held.len(), 1);
    assert_eq!(shared.snapshot().len(), 2);
    let failed = shared.update(|idx| {
        idx.insert("c", &[1.0, 1.0])?;
        idx.insert("a", &[1.0, 1.0])
    });
    assert!(failed.is_err());
    assert_eq!(shared.snapshot().len(), 2);
}

#[derive(Debug, Clone)]
enum Op {
    Insert(u8),
    Delete(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![3 => (0u8..40).prop_map(Op::Insert), 2 => (0u8..40).prop_map(Op::Delete)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_operation_sequences_keep_invariants(ops in proptest::collection::vec(op(), 1..120), ratio in prop::option::of(0.1f64..1.0)) {
        let vecs = random_vectors(40, 6, 15);
        let mut cfg = HnswConfig::new(6);
        cfg.m = 4;
        cfg.m_max0 = 8;
        cfg.ef_construction = 16;
        cfg.rebuild_ratio = ratio;
        let mut idx = HnswIndex::new(cfg).unwrap();
        let mut live = std::collections::BTreeSet::new();
        for op in ops {
            match op {
                Op::Insert(i) => {
                    let r = idx.insert(&key(i as usize), &vecs[i as usize]);
                    prop_assert_eq!(r.is_ok(), live.insert(i));
                }
                Op::Delete(i) => {
                    let r = idx.delete(&key(i as usize));
                    prop_assert_eq!(r.is_ok(), live.remove(&i));
                }
            }
            idx.check_invariants().unwrap();
        }
        prop_assert_eq!(idx.len(), live.len());
        for q in &vecs[..5] {
            let hits = idx.search(q, 40, 40).unwrap();
            let got: std::collections::BTreeSet<String> = hits.iter().map(|h| h.key.clone()).collect();
            let want: std::collections::BTreeSet<String> = live.iter().map(|i| key(*i as usize)).collect();
            prop_assert_eq!(got, want);
            for h in idx.search(q, 5, 8).unwrap() {
                prop_assert!(idx.contains(&h.key));
            }
        }
    }
}

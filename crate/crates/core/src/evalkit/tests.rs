use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::annindex::{HnswConfig, HnswIndex};
use crate::catalog::{Catalog, ProductRecord};
use crate::engine::{i2i_key, RecallCandidate, RecallSource};
use crate::towers::{TowerConfig, TowerModel};
use crate::trainer::{generate_synthetic_logs, SyntheticCatalogSpec};
use crate::Error;

fn set(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

fn record(id: &str, category: u32) -> ProductRecord {
    ProductRecord {
        product_id: id.into(),
        title: "kaos".into(),
        images: vec![],
        category,
        available: true,
        popularity: 0.5,
    }
}

#[test]
fn recall_examples() {
    let truth = set(&["b"]);
    let r = ["a", "b", "c"];
    assert!(!recall_at_k(&r, &truth, 1).unwrap());
    assert!(recall_at_k(&r, &truth, 2).unwrap());
    assert!(recall_at_k(&r, &truth, 100).unwrap());
    assert!(!recall_at_k::<&str>(&[], &truth, 5).unwrap());
    assert!(matches!(recall_at_k(&r, &BTreeSet::new(), 5), Err(Error::Domain(_))));
    assert!(matches!(recall_at_k(&r, &truth, 0), Err(Error::Domain(_))));
}

#[test]
fn modal_category_examples() {
    let mut six_four = vec![1u32; 6];
    six_four.extend([2; 4]);
    assert_eq!(modal_category(&six_four), Some(1));
    let tie: Vec<u32> = [2, 1, 2, 1, 2, 1, 2, 1, 2, 1].to_vec();
    assert_eq!(modal_category(&tie), Some(2));
    assert_eq!(modal_category(&[]), None);
}

#[test]
fn category_accuracy_reads_the_top_ten() {
    let recs: Vec<ProductRecord> = (0..12).map(|i| record(&format!("p{i}"), u32::from(i >= 5))).collect();
    let cat = Catalog::from_records(&recs).unwrap();
    let ids: Vec<String> = (0..12).map(|i| format!("p{i}")).collect();
    // Five of each category in the top ten: the earliest one wins.
    assert!(category_accuracy(&ids, &cat, 0).unwrap());
    let rev: Vec<String> = ids.iter().rev().cloned().collect();
    assert!(category_accuracy(&rev, &cat, 1).unwrap());
    assert!(matches!(category_accuracy::<String>(&[], &cat, 0), Err(Error::Domain(_))));
    assert!(matches!(category_accuracy(&["zz"], &cat, 0), Err(Error::Consistency(_))));
}

/// Matches the oracle in `eval_metrics.py`.
#[test]
fn score_results_matches_oracle() {
    let n = 60;
    let recs: Vec<ProductRecord> = (0..n).map(|i| record(&format!("p{i:02}"), (i % 7) as u32)).collect();
    let cat = Catalog::from_records(&recs).unwrap();
    let mut queries = Vec::new();
    let mut lists = Vec::new();
    for t in 0..25usize {
        let a = (t * 11) % n;
        let mut truth = set(&[&format!("p{a:02}")]);
        if t % 3 == 0 {
            truth.insert(format!("p{:02}", (a + 5) % n));
        }
        let img = crate::towers::ImagePatchGrid::new(4, 2, vec![0.0; 16]).unwrap();
        queries.push(EvalQuery::new(format!("q{t}"), img, truth, (t % 7) as u32).unwrap());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|i| (i * (t + 3) * 37 + t * 13) % 101);
        lists.push(order.iter().map(|i| format!("p{i:02}")).collect::<Vec<_>>());
    }
    let row = score_results("toy", &lists, &queries, &cat).unwrap();
    assert_eq!(row.recall, [0.04, 0.12, 0.2, 0.88, 1.0]);
    assert_eq!(row.category_accuracy, 0.16);
    assert_eq!(row.recall_at(50), Some(0.88));
    assert_eq!(row.recall_at(3), None);
    assert!(matches!(
        score_results("toy", &lists[..3], &queries, &cat),
        Err(Error::Consistency(_))
    ));
}

#[test]
fn queries_need_a_truth() {
    let img = crate::towers::ImagePatchGrid::new(4, 2, vec![0.0; 16]).unwrap();
    assert!(matches!(EvalQuery::new("q".into(), img, BTreeSet::new(), 0), Err(Error::Domain(_))));
}

proptest! {
    #[test]
    fn modal_category_is_a_most_frequent_one(cats in proptest::collection::vec(0u32..4, 1..20)) {
        let m = modal_category(&cats).unwrap();
        let count = |c: u32| cats.iter().filter(|x| **x == c).count();
        let best = (0..4).map(count).max().unwrap();
        prop_assert_eq!(count(m), best);
        let first = cats.iter().position(|c| count(*c) == best).unwrap();
        prop_assert_eq!(m, cats[first]);
    }

    #[test]
    fn recall_never_drops_with_k(
        lists in proptest::collection::vec(proptest::collection::vec(0u8..40, 0..120), 1..8),
        truths in proptest::collection::vec(0u8..40, 8),
    ) {
        let recs: Vec<ProductRecord> = (0..40).map(|i| record(&format!("p{i}"), i % 3)).collect();
        let cat = Catalog::from_records(&recs).unwrap();
        let lists: Vec<Vec<String>> = lists
            .iter()
            .map(|l| {
                let mut seen = BTreeSet::new();
                l.iter().filter(|i| seen.insert(**i)).map(|i| format!("p{i}")).collect()
            })
            .collect();
        let img = crate::towers::ImagePatchGrid::new(4, 2, vec![0.0; 16]).unwrap();
        let queries: Vec<EvalQuery> = (0..lists.len())
            .map(|i| EvalQuery::new(format!("q{i}"), img.clone(), set(&[&format!("p{}", truths[i])]), 0).unwrap())
            .collect();
        let row = score_results("p", &lists, &queries, &cat).unwrap();
        for w in row.recall.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(row.recall.iter().all(|r| (0.0..=1.0).contains(r)));
    }
}

fn candidates(ids: &[(&str, f64)], source: RecallSource) -> Vec<RecallCandidate> {
    ids.iter()
        .map(|(id, s)| RecallCandidate {
            product_id: id.to_string(),
            score: *s,
            source,
            image_id: None,
        })
        .collect()
}

#[test]
fn sweep_picks_the_best_weight() {
    let img = crate::towers::ImagePatchGrid::new(4, 2, vec![0.0; 16]).unwrap();
    let queries = vec![EvalQuery::new("q".into(), img, set(&["t"]), 0).unwrap()];
    // I2I puts the truth sixth; MIEM puts it first.
    let i2i: Vec<(String, f64)> = (0..6)
        .map(|i| (if i == 5 { "t".to_string() } else { format!("x{i}") }, 0.9 - 0.01 * i as f64))
        .collect();
    let i2i: Vec<(&str, f64)> = i2i.iter().map(|(a, b)| (a.as_str(), *b)).collect();
    let recalls = vec![QueryRecalls {
        i2i: candidates(&i2i, RecallSource::I2i),
        miem: candidates(&[("t", 0.9), ("x0", 0.1)], RecallSource::Miem),
        pair: None,
    }];
    let s = sweep_fusion_weight(&recalls, &queries, &[0.0], 100).unwrap();
    assert_eq!(s.best_weight, 0.0);
    assert_eq!(s.curve, vec![(0.0, 0.0)]);
    let s = sweep_fusion_weight(&recalls, &queries, &[0.0, 1.0, 2.0], 100).unwrap();
    assert_eq!(s.curve.len(), 3);
    assert_eq!(s.best_weight, 1.0);
    assert!(matches!(sweep_fusion_weight(&recalls, &queries, &[], 100), Err(Error::Domain(_))));
}

/// Image vectors for `items` latent items; products `2j` and `2j + 1` list
/// the same item for `j < twins`.
fn twin_index(items: usize, twins: usize, seed: u64) -> (Vec<String>, HnswIndex, Vec<usize>) {
    let dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = |base: Option<&[f64]>| -> Vec<f64> {
        let v: Vec<f64> = (0..dim)
            .map(|j| base.map_or(0.0, |b| b[j]) + rng.random_range(-1.0..1.0) * if base.is_some() { 0.05 } else { 1.0 })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let mut latent = Vec::new();
    for j in 0..items {
        latent.push(j);
        if j < twins {
            latent.push(j);
        }
    }
    let bases: Vec<Vec<f64>> = (0..items).map(|_| unit(None)).collect();
    let mut index = HnswIndex::new(HnswConfig::new(dim)).unwrap();
    let ids: Vec<String> = (0..latent.len()).map(|p| format!("p{p:03}")).collect();
    for (p, li) in latent.iter().enumerate() {
        for k in 0..2 {
            index.insert(&i2i_key(&ids[p], k), &unit(Some(&bases[*li]))).unwrap();
        }
    }
    (ids, index, latent)
}

#[test]
fn merging_groups_twin_listings() {
    let (ids, index, latent) = twin_index(30, 6, 1);
    let pos = |p: &str| ids.iter().position(|x| x == p).unwrap();
    let same = |a: &str, b: &str| latent[pos(a)] == latent[pos(b)];
    let pairs = probe_pairs(&index, 3, same).unwrap();
    assert!(pairs.iter().any(|p| p.same) && pairs.iter().any(|p| !p.same));
    let mut clf = SameItemClassifier::new(8, 16, 3).unwrap();
    let curve = clf.train(&pairs, &ClassifierTraining::default()).unwrap();
    assert!(curve.last().unwrap() < &curve[0]);

    let groups = merge_same_items(&ids, &index, &clf, 3).unwrap();
    for (a, pa) in ids.iter().enumerate() {
        for (b, pb) in ids.iter().enumerate() {
            assert_eq!(groups.same(pa, pb), latent[a] == latent[b], "{pa} {pb}");
        }
    }
    assert_eq!(groups.groups().len(), 30);
    assert_eq!(groups.truth_set("p000"), set(&["p000", "p001"]));
    assert!(groups.truth_set("nope").is_empty());

    clf.threshold = 1.0;
    let none = merge_same_items(&ids, &index, &clf, 3).unwrap();
    assert_eq!(none.groups().len(), ids.len());
}

#[test]
fn merging_rejects_bad_inputs() {
    let (ids, index, _) = twin_index(4, 1, 2);
    let clf = SameItemClassifier::new(8, 4, 0).unwrap();
    assert!(matches!(merge_same_items(&ids, &index, &clf, 0), Err(Error::Domain(_))));
    assert!(matches!(merge_same_items(&ids[1..], &index, &clf, 2), Err(Error::Consistency(_))));
    let dup = vec![ids[0].clone(), ids[0].clone()];
    assert!(matches!(merge_same_items(&dup, &index, &clf, 2), Err(Error::Consistency(_))));
    assert!(matches!(clf.probability(&[0.0; 3], &[0.0; 8]), Err(Error::Shape(_))));
    assert!(SameItemClassifier::new(0, 4, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn merge_groups_partition_the_products(seed in 0u64..1000, threshold in 0.0f64..1.0) {
        let (ids, index, _) = twin_index(12, 4, seed);
        let mut clf = SameItemClassifier::new(8, 4, seed).unwrap();
        clf.threshold = threshold;
        let g = merge_same_items(&ids, &index, &clf, 2).unwrap();
        let mut all: Vec<String> = g.groups().iter().flatten().cloned().collect();
        all.sort();
        prop_assert_eq!(&all, &ids);
        for p in &ids {
            prop_assert!(g.truth_set(p).contains(p));
            prop_assert!(g.same(p, p));
        }
    }

    #[test]
    fn classifier_probability_is_in_the_open_interval(seed in 0u64..1000, threshold in 0.0f64..1.0) {
        let mut clf = SameItemClassifier::new(4, 6, seed).unwrap();
        clf.threshold = threshold;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = clf.probability(&a, &b).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert_eq!(clf.is_same(&a, &b).unwrap(), p > threshold);
    }
}

fn tiny_model() -> TowerModel {
    TowerModel::new(TowerConfig {
        token_dim: 16,
        heads: 2,
        out_dim: 16,
        vocab_size: 64,
        max_title_len: 8,
        k_images: 3,
        ..TowerConfig::default()
    })
    .unwrap()
}

fn tiny_spec(classes: usize, items: usize) -> SyntheticCatalogSpec {
    SyntheticCatalogSpec {
        classes,
        items_per_class: items,
        images_per_item: (1, 3),
        vocab_size: 64,
        max_title_len: 8,
        twin_fraction: 0.0,
        seed: 3,
        ..SyntheticCatalogSpec::default()
    }
}

#[test]
fn single_product_catalog_is_always_found() {
    let corpus = generate_synthetic_logs(&tiny_spec(1, 1)).unwrap();
    assert_eq!(corpus.catalog.len(), 1);
    let model = tiny_model();
    let indexes = EvalIndexes::build(&model, &corpus.catalog, true, HnswConfig::new(1)).unwrap();
    let queries = synthetic_eval_queries(&corpus, 3, 1).unwrap();
    let report = run_offline_eval(&model, &indexes, &queries, &EvalOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        assert_eq!(row.recall, [1.0; 5], "{}", row.model);
        assert_eq!(row.category_accuracy, 1.0);
    }
}

#[test]
fn offline_report_layout() {
    let corpus = generate_synthetic_logs(&tiny_spec(4, 3)).unwrap();
    let model = tiny_model();
    let indexes = EvalIndexes::build(&model, &corpus.catalog, false, HnswConfig::new(1)).unwrap();
    assert_eq!(indexes.miem.len(), corpus.catalog.len());
    let images: usize = corpus.catalog.iter().map(|r| r.images.len()).sum();
    assert_eq!(indexes.i2i.len(), images);

    let queries = synthetic_eval_queries(&corpus, 2, 9).unwrap();
    assert_eq!(queries.len(), 24);
    assert_eq!(queries, synthetic_eval_queries(&corpus, 2, 9).unwrap());
    let opts = EvalOptions {
        weight_grid: vec![0.0, 1.0],
        ..EvalOptions::default()
    };
    let report = run_offline_eval(&model, &indexes, &queries, &opts).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, [ROW_I2I, ROW_MIEM, ROW_FUSED]);
    assert_eq!(report.queries, 24);
    let sweep = report.sweep.as_ref().unwrap();
    assert_eq!(report.config["fusion_weight"], sweep.best_weight.to_string());
    // Every product of a 12-product catalog is within the top 100.
    for row in &report.rows {
        assert_eq!(row.recall_at(100), Some(1.0));
    }

    let csv = report.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "Model,Category Accuracy,Recall@1,Recall@5,Recall@10,Recall@50,Recall@100");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("I2I,"));
    assert_eq!(lines[1].split(',').count(), 7);

    let text = report.to_text();
    let first = text.lines().next().unwrap();
    assert!(first.starts_with("Model") && first.ends_with("Recall@100"));
    assert!(text.contains("24 queries"));
    assert!(text.contains("fusion sweep"));
    assert!(text.contains("depth = 100"));
    assert!(run_offline_eval(&model, &indexes, &[], &opts).is_err());
}

#[test]
fn truth_expansion_follows_merge_groups() {
    let (ids, index, latent) = twin_index(5, 2, 4);
    let pos = |p: &str| ids.iter().position(|x| x == p).unwrap();
    let pairs = probe_pairs(&index, 2, |a, b| latent[pos(a)] == latent[pos(b)]).unwrap();
    let mut clf = SameItemClassifier::new(8, 16, 0).unwrap();
    clf.train(&pairs, &ClassifierTraining::default()).unwrap();
    let groups = merge_same_items(&ids, &index, &clf, 2).unwrap();
    let img = crate::towers::ImagePatchGrid::new(4, 2, vec![0.0; 16]).unwrap();
    let mut qs = vec![
        EvalQuery::new("a".into(), img.clone(), set(&["p000"]), 0).unwrap(),
        EvalQuery::new("b".into(), img, set(&["p004"]), 0).unwrap(),
    ];
    expand_truth(&mut qs, &groups);
    assert_eq!(qs[0].truth, set(&["p000", "p001"]));
    assert_eq!(qs[1].truth, set(&["p004"]));
}

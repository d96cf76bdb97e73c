use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::merge::SameItemGroups;
use super::metrics::{category_accuracy, mean_hits, recall_at_k, RECALL_KS};
use crate::annindex::{HnswConfig, HnswIndex};
use crate::catalog::{Catalog, ProductRecord};
use crate::engine::{detect_stub, fuse_scores, recall_with_dedup, RecallCandidate, RecallOptions, RecallSource};
use crate::error::{domain_err, Error, Result};
use crate::lifecycle::{build_index, I2iExtractor, MiemExtractor, PairExtractor};
use crate::towers::{ImagePatchGrid, PixelEmbedder, TowerModel};
use crate::trainer::{render_heldout_views, SyntheticCorpus};

/// A query image with the products that show the same item.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub query_id: String,
    pub image: ImagePatchGrid,
    pub truth: BTreeSet<String>,
    pub category: u32,
}

impl EvalQuery {
    pub fn new(query_id: String, image: ImagePatchGrid, truth: BTreeSet<String>, category: u32) -> Result<Self> {
        if truth.is_empty() {
            return Err(domain_err!("query {query_id} has no true same item"));
        }
        Ok(Self {
            query_id,
            image,
            truth,
            category,
        })
    }
}

/// `per_item` fresh photos of every latent item of `corpus`, each answered
/// by all products listing that item.
pub fn synthetic_eval_queries(corpus: &SyntheticCorpus, per_item: usize, seed: u64) -> Result<Vec<EvalQuery>> {
    let mut by_item: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (p, li) in corpus.truth.latent_item.iter().enumerate() {
        by_item.entry(*li).or_default().insert(corpus.catalog[p].product_id.clone());
    }
    render_heldout_views(&corpus.spec, per_item, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let truth = by_item.get(&v.latent_item).cloned().unwrap_or_default();
            EvalQuery::new(format!("q{i:05}"), v.image, truth, v.class_id)
        })
        .collect()
}

/// Adds every product merged with a true product to each truth set.
pub fn expand_truth(queries: &mut [EvalQuery], groups: &SameItemGroups) {
    for q in queries {
        let extra: Vec<String> = q.truth.iter().flat_map(|p| groups.truth_set(p)).collect();
        q.truth.extend(extra);
    }
}

/// The indexes compared offline, all built from one catalog.
#[derive(Debug, Clone)]
pub struct EvalIndexes {
    pub i2i: HnswIndex,
    pub miem: HnswIndex,
    /// One embedding per (image, title) pair.
    pub pair: Option<HnswIndex>,
    pub catalog: Catalog,
}

impl EvalIndexes {
    /// Builds every index with the HNSW settings of `hnsw` (its `dim` is
    /// replaced per index).
    pub fn build(model: &TowerModel, records: &[ProductRecord], with_pair: bool, hnsw: HnswConfig) -> Result<Self> {
        let (size, patch) = model.config().grid();
        let i2i_ex = I2iExtractor::new(PixelEmbedder::new(size, patch));
        let miem_ex = MiemExtractor::new(model)?;
        let with_dim = |dim| HnswConfig { dim, ..hnsw };
        let (i2i, f1) = build_index(records, &i2i_ex, with_dim(size * size))?;
        let (miem, f2) = build_index(records, &miem_ex, with_dim(model.config().out_dim))?;
        for f in f1.iter().chain(&f2) {
            log::warn!("{} left out of the eval indexes: {}", f.product_id, f.reason);
        }
        let pair = if with_pair {
            let ex = PairExtractor::new(model)?;
            Some(build_index(records, &ex, with_dim(model.config().out_dim))?.0)
        } else {
            None
        };
        Ok(Self {
            i2i,
            miem,
            pair,
            catalog: Catalog::from_records(records)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Products retrieved per query and source.
    pub depth: usize,
    pub recall: RecallOptions,
    /// Used when `weight_grid` is empty.
    pub fusion_weight: f64,
    /// Candidate fusion weights; the best by Recall@5 is reported.
    pub weight_grid: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            depth: 100,
            recall: RecallOptions {
                overfetch: 3,
                ef_search: 200,
            },
            fusion_weight: 1.0,
            weight_grid: Vec::new(),
        }
    }
}

/// Per-source recall lists of one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecalls {
    pub i2i: Vec<RecallCandidate>,
    pub miem: Vec<RecallCandidate>,
    pub pair: Option<Vec<RecallCandidate>>,
}

impl QueryRecalls {
    pub fn fused(&self, weight: f64, depth: usize) -> Result<Vec<String>> {
        let mut f = fuse_scores(&self.i2i, &self.miem, weight)?;
        f.truncate(depth);
        Ok(f.into_iter().map(|c| c.product_id).collect())
    }
}

fn ids(c: &[RecallCandidate]) -> Vec<String> {
    c.iter().map(|c| c.product_id.clone()).collect()
}

/// Runs every query through detection, both query embeddings and each
/// index, exactly as the serving path does.
pub fn collect_recalls(
    model: &TowerModel,
    indexes: &EvalIndexes,
    queries: &[EvalQuery],
    opts: &EvalOptions,
) -> Result<Vec<QueryRecalls>> {
    let (size, patch) = model.config().grid();
    let pixels = PixelEmbedder::new(size, patch);
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let bbox = detect_stub(&q.image, 1.0)?[0];
        let crop = q.image.crop(bbox.as_tuple())?;
        let qm = model.query_embedding(&crop)?;
        let qi = pixels.embed(&crop)?;
        let o = &opts.recall;
        out.push(QueryRecalls {
            i2i: recall_with_dedup(&indexes.i2i, &qi, opts.depth, RecallSource::I2i, o)?,
            miem: recall_with_dedup(&indexes.miem, &qm, opts.depth, RecallSource::Miem, o)?,
            pair: match &indexes.pair {
                Some(p) => Some(recall_with_dedup(p, &qm, opts.depth, RecallSource::I2i, o)?),
                None => None,
            },
        });
    }
    Ok(out)
}

/// Metrics of one retrieval configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub category_accuracy: f64,
    /// Recall at each cutoff of [`RECALL_KS`].
    pub recall: [f64; 5],
}

impl EvalRow {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        RECALL_KS.iter().position(|c| *c == k).map(|i| self.recall[i])
    }
}

/// Scores ranked result lists, one per query.
pub fn score_results(name: &str, results: &[Vec<String>], queries: &[EvalQuery], catalog: &Catalog) -> Result<EvalRow> {
    if results.len() != queries.len() {
        return Err(Error::Consistency(format!(
            "{} result lists for {} queries",
            results.len(),
            queries.len()
        )));
    }
    let mut recall = [0.0; 5];
    for (slot, k) in RECALL_KS.iter().enumerate() {
        let hits: Vec<bool> = results
            .iter()
            .zip(queries)
            .map(|(r, q)| recall_at_k(r, &q.truth, *k))
            .collect::<Result<_>>()?;
        recall[slot] = mean_hits(hits);
    }
    let mut cat = Vec::with_capacity(queries.len());
    for (r, q) in results.iter().zip(queries) {
        cat.push(!r.is_empty() && category_accuracy(r, catalog, q.category)?);
    }
    Ok(EvalRow {
        model: name.to_string(),
        category_accuracy: mean_hits(cat),
        recall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_weight: f64,
    /// `(weight, Recall@5)` in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Recall@5 of the fused lists for each weight of `grid`; the best weight
/// wins, ties going to the smaller weight.
pub fn sweep_fusion_weight(recalls: &[QueryRecalls], queries: &[EvalQuery], grid: &[f64], depth: usize) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(domain_err!("empty weight grid"));
    }
    let mut curve = Vec::with_capacity(grid.len());
    for w in grid {
        let mut hits = Vec::with_capacity(queries.len());
        for (r, q) in recalls.iter().zip(queries) {
            hits.push(recall_at_k(&r.fused(*w, depth)?, &q.truth, 5)?);
        }
        curve.push((*w, mean_hits(hits)));
    }
    let best_weight = curve
        .iter()
        .copied()
        .reduce(|best, c| if c.1 > best.1 || (c.1 == best.1 && c.0 < best.0) { c } else { best })
        .expect("non-empty grid")
        .0;
    Ok(SweepResult { best_weight, curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub queries: usize,
    /// Effective settings, echoed into the report.
    pub config: BTreeMap<String, String>,
    pub sweep: Option<SweepResult>,
}

pub const ROW_I2I: &str = "I2I";
pub const ROW_MIEM: &str = "MIEM";
pub const ROW_PAIR: &str = "MIEM (1 emb/img)";
pub const ROW_FUSED: &str = "MIEM+I2I";

impl EvalReport {
    pub fn row(&self, model: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

/// I2I-only, MIEM-only, optionally MIEM with one embedding per image, and
/// MIEM+I2I fusion, scored on `queries`.
pub fn run_offline_eval(
    model: &TowerModel,
    indexes: &EvalIndexes,
    queries: &[EvalQuery],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(domain_err!("no eval queries"));
    }
    let recalls = collect_recalls(model, indexes, queries, opts)?;
    let sweep = if opts.weight_grid.is_empty() {
        None
    } else {
        Some(sweep_fusion_weight(&recalls, queries, &opts.weight_grid, opts.depth)?)
    };
    let weight = sweep.as_ref().map_or(opts.fusion_weight, |s| s.best_weight);
    let cat = &indexes.catalog;
    let mut rows = vec![
        score_results(ROW_I2I, &recalls.iter().map(|r| ids(&r.i2i)).collect::<Vec<_>>(), queries, cat)?,
        score_results(ROW_MIEM, &recalls.iter().map(|r| ids(&r.miem)).collect::<Vec<_>>(), queries, cat)?,
    ];
    if indexes.pair.is_some() {
        let lists: Vec<Vec<String>> = recalls.iter().map(|r| ids(r.pair.as_deref().unwrap_or(&[]))).collect();
        rows.push(score_results(ROW_PAIR, &lists, queries, cat)?);
    }
    let fused: Vec<Vec<String>> = recalls.iter().map(|r| r.fused(weight, opts.depth)).collect::<Result<_>>()?;
    rows.push(score_results(ROW_FUSED, &fused, queries, cat)?);

    let mut config = BTreeMap::new();
    config.insert("depth".into(), opts.depth.to_string());
    config.insert("ef_search".into(), opts.recall.ef_search.to_string());
    config.insert("overfetch".into(), opts.recall.overfetch.to_string());
    config.insert("fusion_weight".into(), weight.to_string());
    config.insert("products".into(), cat.len().to_string());
    config.insert("i2i_entries".into(), indexes.i2i.len().to_string());
    config.insert("miem_entries".into(), indexes.miem.len().to_string());
    Ok(EvalReport {
        rows,
        queries: queries.len(),
        config,
        sweep,
    })
}

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::numcore::dot;

const MAX_LEVEL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HnswConfig {
    pub dim: usize,
    /// Neighbor cap on layers above 0.
    pub m: usize,
    /// Neighbor cap on layer 0.
    pub m_max0: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
    /// Rebuild once `deleted / live` exceeds this; `None` disables it.
    pub rebuild_ratio: Option<f64>,
}

impl HnswConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            m: 16,
            m_max0: 32,
            ef_construction: 200,
            ef_search: 64,
            seed: 0,
            rebuild_ratio: Some(0.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(domain_err!("index dimension must be positive"));
        }
        if self.m < 2 || self.m_max0 < self.m {
            return Err(domain_err!("need 2 <= M <= M_max0, got M={} M_max0={}", self.m, self.m_max0));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(domain_err!("ef values must be positive"));
        }
        if let Some(r) = self.rebuild_ratio {
            if !(r > 0.0) {
                return Err(domain_err!("rebuild ratio must be positive, got {r}"));
            }
        }
        Ok(())
    }

    fn level_scale(&self) -> f64 {
        1.0 / (self.m as f64).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub key: String,
    /// Cosine similarity to the query.
    pub score: f64,
}

/// Orders hits by descending score, then ascending key.
pub fn rank_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key))
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Node {
    pub key: String,
    pub vector: Vec<f64>,
    pub level: usize,
    /// `neighbors[l]` for `l` in `0..=level`.
    pub neighbors: Vec<Vec<u32>>,
    pub deleted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    score: f64,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    // Higher score is greater; on ties the lower id is greater.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hierarchical navigable small-world graph over cosine similarity.
///
/// Vectors are stored unit-normalized, so similarity is a dot product.
/// Deletion tombstones a node and keeps its edges; searches route through
/// tombstones but never return them. Levels are a pure function of the
/// seed and the node's insertion position, so the same operation sequence
/// always builds the same graph.
#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    pub(crate) cfg: HnswConfig,
    pub(crate) nodes: Vec<Node>,
    pub(crate) live: HashMap<String, u32>,
    pub(crate) entry: Option<u32>,
    pub(crate) deleted: usize,
}

impl HnswIndex {
    pub fn new(cfg: HnswConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            nodes: Vec::new(),
            live: HashMap::new(),
            entry: None,
            deleted: 0,
        })
    }

    pub fn config(&self) -> &HnswConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn tombstones(&self) -> usize {
        self.deleted
    }

    /// Nodes in the graph, tombstoned ones included.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.live.contains_key(key)
    }

    /// Stored unit vector of a live key.
    pub fn vector(&self, key: &str) -> Option<&[f64]> {
        self.live.get(key).map(|id| self.nodes[*id as usize].vector.as_slice())
    }

    /// Live entries in insertion order.
    pub fn live_entries(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.nodes
            .iter()
            .filter(|n| !n.deleted)
            .map(|n| (n.key.as_str(), n.vector.as_slice()))
    }

    pub fn keys(&self) -> Vec<String> {
        let mut k: Vec<String> = self.live.keys().cloned().collect();
        k.sort();
        k
    }

    fn level_for(&self, position: usize) -> usize {
        let bits = splitmix(self.cfg.seed ^ splitmix(position as u64));
        let u = ((bits >> 11) + 1) as f64 / (1u64 << 53) as f64;
        ((-u.ln() * self.cfg.level_scale()) as usize).min(MAX_LEVEL)
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            self.cfg.m_max0
        } else {
            self.cfg.m
        }
    }

    fn sim(&self, q: &[f64], id: u32) -> f64 {
        dot(q, &self.nodes[id as usize].vector)
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.cfg.dim {
            return Err(shape_err!("vector has dim {}, index has {}", v.len(), self.cfg.dim));
        }
        Ok(())
    }

    fn greedy(&self, q: &[f64], mut ep: u32, layer: usize) -> u32 {
        let mut best = self.sim(q, ep);
        loop {
            let mut moved = false;
            for &n in &self.nodes[ep as usize].neighbors[layer] {
                let s = self.sim(q, n);
                if s > best || (s == best && n < ep) {
                    best = s;
                    ep = n;
                    moved = true;
                }
            }
            if !moved {
                return ep;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` candidates, best first.
    fn search_layer(&self, q: &[f64], ep: u32, ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited = vec![false; self.nodes.len()];
        visited[ep as usize] = true;
        let start = Cand {
            score: self.sim(q, ep),
            id: ep,
        };
        let mut frontier = BinaryHeap::from([start]);
        let mut found = BinaryHeap::from([Reverse(start)]);
        while let Some(c) = frontier.pop() {
            let worst = found.peek().map(|r| r.0).unwrap_or(c);
            if found.len() >= ef && c < worst {
                break;
            }
            for &n in &self.nodes[c.id as usize].neighbors[layer] {
                if std::mem::replace(&mut visited[n as usize], true) {
                    continue;
                }
                let cand = Cand {
                    score: self.sim(q, n),
                    id: n,
                };
                let worst = found.peek().map(|r| r.0);
                if found.len() < ef || worst.is_some_and(|w| cand > w) {
                    frontier.push(cand);
                    found.push(Reverse(cand));
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = found.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Keeps a candidate only if it is closer to the base than to every
    /// neighbor already kept, which spreads edges across directions. Free
    /// slots are then refilled with the best pruned candidates.
    fn select_neighbors(&self, candidates: &[Cand], m: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(m);
        let mut pruned = Vec::new();
        for c in candidates {
            if kept.len() >= m {
                break;
            }
            let v = &self.nodes[c.id as usize].vector;
            if kept.iter().all(|k| self.sim(v, *k) < c.score) {
                kept.push(c.id);
            } else {
                pruned.push(c.id);
            }
        }
        let room = m - kept.len();
        kept.extend(pruned.into_iter().take(room));
        kept
    }

    fn shrink(&mut self, id: u32, layer: usize) {
        let cap = self.cap(layer);
        if self.nodes[id as usize].neighbors[layer].len() <= cap {
            return;
        }
        let base = self.nodes[id as usize].vector.clone();
        let mut cands: Vec<Cand> = self.nodes[id as usize].neighbors[layer]
            .iter()
            .map(|&n| Cand {
                score: self.sim(&base, n),
                id: n,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&cands, cap);
        self.nodes[id as usize].neighbors[layer] = kept;
    }

    /// Adds `key`. A tombstoned key may be re-inserted; it gets a new node.
    pub fn insert(&mut self, key: &str, vector: &[f64]) -> Result<()> {
        self.check_dim(vector)?;
        if self.live.contains_key(key) {
            return Err(Error::Conflict(format!("key {key} is already live")));
        }
        let v = normalized(vector).ok_or_else(|| domain_err!("vector for {key} has zero or non-finite norm"))?;
        self.insert_unit(key, v)
    }

    fn insert_unit(&mut self, key: &str, v: Vec<f64>) -> Result<()> {
        let id = u32::try_from(self.nodes.len()).map_err(|_| domain_err!("index is full"))?;
        let level = self.level_for(self.nodes.len());
        self.nodes.push(Node {
            key: key.to_string(),
            vector: v.clone(),
            level,
            neighbors: vec![Vec::new(); level + 1],
            deleted: false,
        });
        self.live.insert(key.to_string(), id);
        let Some(entry) = self.entry else {
            self.entry = Some(id);
            return Ok(());
        };
        let top = self.nodes[entry as usize].level;
        let mut ep = entry;
        for layer in (level + 1..=top).rev() {
            ep = self.greedy(&v, ep, layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&v, ep, self.cfg.ef_construction, layer);
            let chosen = self.select_neighbors(&found, self.cfg.m);
            for &n in &chosen {
                self.nodes[n as usize].neighbors[layer].push(id);
                self.shrink(n, layer);
            }
            self.nodes[id as usize].neighbors[layer] = chosen;
            ep = found[0].id;
        }
        if level > top {
            self.entry = Some(id);
        }
        Ok(())
    }

    /// Tombstones `key`, then rebuilds if the tombstone ratio is exceeded.
    pub fn delete(&mut self, key: &str) -> Result<()> {
        let id = self
            .live
            .remove(key)
            .ok_or_else(|| Error::NotFound(format!("key {key} is not in the index")))?;
        self.nodes[id as usize].deleted = true;
        self.deleted += 1;
        if self.needs_rebuild() {
            *self = self.rebuild();
        }
        Ok(())
    }

    pub fn needs_rebuild(&self) -> bool {
        match self.cfg.rebuild_ratio {
            Some(r) => self.deleted > 0 && self.deleted as f64 > r * self.live.len() as f64,
            None => false,
        }
    }

    /// A fresh graph over the live entries, in their insertion order.
    pub fn rebuild(&self) -> HnswIndex {
        let mut fresh = HnswIndex {
            cfg: self.cfg,
            nodes: Vec::with_capacity(self.live.len()),
            live: HashMap::with_capacity(self.live.len()),
            entry: None,
            deleted: 0,
        };
        for (key, v) in self.live_entries() {
            fresh
                .insert_unit(key, v.to_vec())
                .expect("live entries are valid and distinct");
        }
        fresh
    }

    /// Top `k` live keys by cosine similarity using the configured
    /// `ef_search`.
    pub fn search_default(&self, query: &[f64], k: usize) -> Result<Vec<SearchHit>> {
        self.search(query, k, self.cfg.ef_search.max(k))
    }

    /// Top `k` live keys by cosine similarity, best first, ties by key.
    ///
    /// The beam is widened by the inverse live fraction so tombstones do not
    /// eat into it. A beam that covers every node is answered by a full
    /// scan, which makes the result exact.
    pub fn search(&self, query: &[f64], k: usize, ef_search: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(domain_err!("k must be at least 1"));
        }
        if ef_search < k {
            return Err(domain_err!("ef_search {ef_search} is smaller than k {k}"));
        }
        self.check_dim(query)?;
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        if self.live.is_empty() {
            return Ok(Vec::new());
        }
        let q = normalized(query).unwrap_or_else(|| query.to_vec());
        let total = self.nodes.len();
        let ef = (ef_search as f64 * total as f64 / self.live.len() as f64).ceil() as usize;
        if ef >= total {
            return Ok(self.exact(&q, k));
        }
        let top = self.nodes[entry as usize].level;
        let mut ep = entry;
        for layer in (1..=top).rev() {
            ep = self.greedy(&q, ep, layer);
        }
        let mut hits: Vec<SearchHit> = self
            .search_layer(&q, ep, ef, 0)
            .into_iter()
            .filter(|c| !self.nodes[c.id as usize].deleted)
            .map(|c| SearchHit {
                key: self.nodes[c.id as usize].key.clone(),
                score: c.score,
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }

    fn exact(&self, q: &[f64], k: usize) -> Vec<SearchHit> {
        let mut hits: Vec<SearchHit> = self
            .live_entries()
            .map(|(key, v)| SearchHit {
                key: key.to_string(),
                score: dot(q, v),
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        hits
    }

    /// Degree bounds, layer membership, key map and entry point.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: String| Error::Consistency(m);
        for (i, n) in self.nodes.iter().enumerate() {
            if n.neighbors.len() != n.level + 1 {
                return Err(bad(format!("node {i} has {} layers for level {}", n.neighbors.len(), n.level)));
            }
            for (layer, adj) in n.neighbors.iter().enumerate() {
                if adj.len() > self.cap(layer) {
                    return Err(bad(format!("node {i} has {} neighbors on layer {layer}", adj.len())));
                }
                for &j in adj {
                    let Some(other) = self.nodes.get(j as usize) else {
                        return Err(bad(format!("node {i} links to missing node {j}")));
                    };
                    if other.level < layer || j as usize == i {
                        return Err(bad(format!("bad edge {i} -> {j} on layer {layer}")));
                    }
                }
            }
        }
        let live = self.nodes.iter().filter(|n| !n.deleted).count();
        if live != self.live.len() || self.nodes.len() - live != self.deleted {
            return Err(bad("live/deleted counters disagree with nodes".into()));
        }
        for (key, &id) in &self.live {
            let n = &self.nodes[id as usize];
            if n.deleted || &n.key != key {
                return Err(bad(format!("key map entry {key} points at the wrong node")));
            }
        }
        match self.entry {
            None if !self.nodes.is_empty() => Err(bad("no entry point".into())),
            Some(e) if self.nodes.iter().any(|n| n.level > self.nodes[e as usize].level) => {
                Err(bad("entry point is not on the top layer".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Exact top `k` of `store` by cosine similarity, ties by ascending key.
/// Zero vectors score 0.
pub fn brute_force_knn<'a, I>(store: I, query: &[f64], k: usize) -> Vec<SearchHit>
where
    I: IntoIterator<Item = (&'a str, &'a [f64])>,
{
    let q = normalized(query);
    let mut hits: Vec<SearchHit> = store
        .into_iter()
        .map(|(key, v)| {
            let score = match (&q, normalized(v)) {
                (Some(q), Some(v)) => dot(q, &v),
                _ => 0.0,
            };
            SearchHit {
                key: key.to_string(),
                score,
            }
        })
        .collect();
    hits.sort_by(rank_order);
    hits.truncate(k);
    hits
}
